//! Carrying a group subnet's `{others} ∪ G` output into the full label
//! space and fusing it with subnet 0.

use confusion_subnets::ensemble::{fuse, transform, OutputSpaceMap};
use confusion_subnets::{ConfusingGroup, FusionConfig, FusionRule, ProbabilityVector};

fn main() -> confusion_subnets::Result<()> {
    // subnet 0 over 5 classes is torn between 1 and 3
    let subnet0 = ProbabilityVector::new(vec![0.05, 0.40, 0.05, 0.38, 0.12])?;
    // the {1, 3} specialist: [others, class 1, class 3]
    let map = OutputSpaceMap::new(ConfusingGroup::new(vec![1, 3])?, 5)?;
    let specialist = ProbabilityVector::new(vec![0.20, 0.15, 0.65])?;

    let carried = transform(&specialist, &map, &subnet0)?;
    println!("subnet 0        {:?}", subnet0.values());
    println!("specialist      {:?}", specialist.values());
    println!("transformed     {:?}", carried.values());

    for rule in [FusionRule::Sum, FusionRule::Product] {
        let fused = fuse(
            &[subnet0.clone(), carried.clone()],
            &FusionConfig {
                rule,
                include_subnet0: true,
            },
        )?;
        let v: Vec<String> = fused.values().iter().map(|p| format!("{p:.4}")).collect();
        println!("{:<7} -> [{}], argmax {}", rule.as_str(), v.join(", "), fused.argmax());
    }
    Ok(())
}
