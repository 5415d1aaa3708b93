//! One pass through the stages by hand: baseline, confusion, groups,
//! subnets, fused evaluation.

use confusion_subnets::data::generate;
use confusion_subnets::metrics::evaluate;
use confusion_subnets::pipeline::{head0_confusion, train_baseline, train_subnets, HeadLoss, TRAIN_FRACTION};
use confusion_subnets::{ExperimentConfig, FusionConfig, GroupPartition};

fn main() -> confusion_subnets::Result<()> {
    let cfg = ExperimentConfig::default();
    let confusion_subnets::pipeline::DataSource::Synthetic(spec) = &cfg.data else {
        unreachable!("default config is synthetic");
    };
    let (train, val) = generate(spec)?.stratified_split(TRAIN_FRACTION, 1)?;
    let scaling = train.feature_scaling();
    let (train, val) = (train.standardized(&scaling)?, val.standardized(&scaling)?);

    let (mut model, log) = train_baseline(&train, cfg.hidden_dim, HeadLoss::CrossEntropy, &cfg.phase1, 11)?;
    println!("baseline epoch losses {:?}", log.epoch_losses);
    let k = model.class_count();
    let fusion = FusionConfig::default();
    let before = evaluate(&model, &val, &GroupPartition::empty(k), &fusion)?;

    let cm = head0_confusion(&model, &train)?;
    let partition = cm.partition_groups(cfg.threshold)?;
    println!("groups: {:?}", partition.groups().iter().map(|g| g.classes()).collect::<Vec<_>>());

    train_subnets(&mut model, &train, &partition, HeadLoss::CrossEntropy, &cfg.phase2, 12)?;
    let after = evaluate(&model, &val, &partition, &fusion)?;

    println!("             miou    accuracy");
    println!("head 0 only  {:.4}  {:.4}", before.miou, before.accuracy);
    println!("+ subnets    {:.4}  {:.4}", after.miou, after.accuracy);
    print!("{}", after.plot_data());
    Ok(())
}
