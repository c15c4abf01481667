//! Shared fixtures for the benchmarks.

use vtpose::dataset::SampleRecord;
use vtpose::fusionnet::{crop_and_mask, PreparedSample};
use vtpose::simworld::{build_object, generate_trajectory, SimConfig};

/// The first rendered instance of `object` under the default desk config.
pub fn desk_record(object: u16) -> (SampleRecord, SimConfig) {
    let cfg = SimConfig { instances: 1, ..SimConfig::default() };
    let o = build_object(object, cfg.model_point_count).expect("known object");
    let record = generate_trajectory(&o, &cfg, 0, true).expect("grasp").remove(0);
    (record, cfg)
}

pub fn desk_sample(object: u16) -> PreparedSample {
    let (record, cfg) = desk_record(object);
    crop_and_mask(&record, &cfg.camera).expect("object visible")
}
