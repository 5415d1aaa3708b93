//! From a confusion matrix to confusing groups and the loss weight matrix.

use confusion_subnets::confusion::CsvKind;
use confusion_subnets::{ConfusingGroup, ConfusionMatrix};

fn main() -> confusion_subnets::Result<()> {
    // classes 0/1 swap often, 2 leaks into 3 one way, 4 is clean
    let cm = ConfusionMatrix::from_counts(&[
        vec![70, 28, 1, 1, 0],
        vec![20, 78, 0, 1, 1],
        vec![0, 1, 85, 14, 0],
        vec![1, 0, 2, 96, 1],
        vec![0, 1, 0, 1, 98],
    ])?;
    let names: Vec<String> = ["car", "truck", "wall", "fence", "sky"].iter().map(|s| s.to_string()).collect();
    print!("{}", cm.to_csv(&names, CsvKind::Normalized)?);

    for threshold in [0.05, 0.2, 0.3] {
        let partition = cm.partition_groups(threshold)?;
        let groups: Vec<Vec<&str>> = partition
            .groups()
            .iter()
            .map(|g| g.classes().iter().map(|&c| names[c].as_str()).collect())
            .collect();
        println!("tau {threshold}: groups {groups:?}, ungrouped {:?}", partition.ungrouped());
    }

    let c = cm.derive_weight_matrix(1.0)?;
    println!("weight matrix (diagonal floored at 1):");
    for i in 0..c.class_count() {
        let row: Vec<String> = (0..c.class_count()).map(|j| format!("{:.2}", c.get(i, j))).collect();
        println!("  {}", row.join(" "));
    }

    // the same matrix seen by a subnet over {others, wall, fence}
    let group = ConfusingGroup::new(vec![2, 3])?;
    let collapsed = cm.collapse_to_group(&group)?;
    println!("collapsed onto {{others, wall, fence}}:");
    for i in 0..3 {
        let row: Vec<String> = (0..3).map(|j| collapsed.count(i, j).to_string()).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
