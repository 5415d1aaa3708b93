//! The four-arm experiment with all artifacts written to a directory.
//!
//! cargo run --release --example ablation [output_dir] [key=value ...]

use confusion_subnets::{run_experiment, Arm, ExperimentConfig};

fn main() -> confusion_subnets::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig {
        output_dir: args.next().unwrap_or_else(|| "ablation-out".into()).into(),
        ..ExperimentConfig::default()
    };
    for kv in args {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| confusion_subnets::Error::Config(format!("expected key=value, got `{kv}`")))?;
        cfg.set(key, value)?;
    }

    let result = run_experiment(&cfg)?;
    println!("groups: {:?}", result.partition.groups().iter().map(|g| g.classes()).collect::<Vec<_>>());
    print!("{}", result.table());
    let base = result.report(Arm::CeOnly);
    let best = result.report(Arm::NewCeSubnets);
    println!(
        "newce+subnets vs ce: miou {:+.4}, intra-group mass {:.1}% lower",
        best.miou - base.miou,
        100.0 * (1.0 - best.total_intra_group_mass() / base.total_intra_group_mass())
    );
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}
