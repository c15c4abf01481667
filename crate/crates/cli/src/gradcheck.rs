use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;
use vtpose::config::ExperimentConfig;
use vtpose::fusionnet::NetworkConfig;
use vtpose::tensor::{Fault, OpKind};
use vtpose::training::{gradcheck_config, gradcheck_network};

use crate::common::{usage, write_file, write_resolved, Failure};

pub const TOLERANCE: f64 = 1e-3;

#[derive(Args)]
pub struct GradcheckArgs {
    /// `reduced` for the built-in reduced network, or a TOML file whose
    /// `[network]` table is checked (at most 8 points).
    #[arg(long, default_value = "reduced")]
    config: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Scales the backward rule of one op by 1.5; the check must then fail.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    /// Also write gradcheck.csv and the resolved config here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckRun {
    command: &'static str,
    seed: u64,
    tolerance: f64,
    network: NetworkConfig,
}

const FAULTABLE: [OpKind; 10] = [
    OpKind::MatMul,
    OpKind::AddRow,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Log,
    OpKind::Conv2d,
    OpKind::MeanAxis,
    OpKind::GatherRows,
    OpKind::NormalizeRows,
    OpKind::PoseDistance,
];

fn parse_fault(name: &str) -> Result<Fault> {
    let key = name.replace(['-', '_'], "").to_lowercase();
    FAULTABLE
        .into_iter()
        .find(|k| format!("{k:?}").to_lowercase() == key)
        .map(|op| Fault { op, factor: 1.5 })
        .ok_or_else(|| usage(format!("cannot inject a fault into {name:?}")))
}

pub fn run(args: GradcheckArgs) -> Result<()> {
    let network = if args.config == "reduced" { gradcheck_config() } else { ExperimentConfig::load(args.config.as_ref())?.network };
    if network.n_points > 8 {
        return Err(usage(format!("gradcheck needs a reduced config with at most 8 points, got {}", network.n_points)));
    }
    network.validate()?;
    let fault = args.inject_fault.as_deref().map(parse_fault).transpose()?;
    let checks = gradcheck_network(&network, args.seed, fault)?;
    let mut csv = String::from("tensor,numel,max_rel_error,pass\n");
    println!("{:<28} {:>7} {:>14}  result", "tensor", "numel", "max rel error");
    let mut failed = 0;
    for c in &checks {
        let pass = c.max_rel_error <= TOLERANCE;
        failed += usize::from(!pass);
        println!("{:<28} {:>7} {:>14.3e}  {}", c.name, c.numel, c.max_rel_error, if pass { "pass" } else { "FAIL" });
        csv.push_str(&format!("{},{},{:e},{pass}\n", c.name, c.numel, c.max_rel_error));
    }
    if let Some(dir) = &args.out {
        write_resolved(dir, None, &GradcheckRun { command: "gradcheck", seed: args.seed, tolerance: TOLERANCE, network })?;
        write_file(dir, "gradcheck.csv", &csv)?;
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} of {} tensors exceed relative error {TOLERANCE:e}", checks.len())).into());
    }
    println!("all {} tensors within {TOLERANCE:e}", checks.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_names() {
        assert_eq!(parse_fault("relu").unwrap().op, OpKind::Relu);
        assert_eq!(parse_fault("pose-distance").unwrap().op, OpKind::PoseDistance);
        assert!(parse_fault("teleport").is_err());
    }
}
