//! Synthetic clusters with two planted confusable pairs, saved as `.cfds`.
//!
//! cargo run --example generate_dataset [out.cfds]

use confusion_subnets::data::{generate, save_dataset, ConfusablePair, SampleCounts};
use confusion_subnets::SyntheticSpec;

fn main() -> confusion_subnets::Result<()> {
    let spec = SyntheticSpec {
        class_count: 6,
        feature_dim: 4,
        samples_per_class: SampleCounts::Uniform(200),
        confusable_pairs: vec![
            ConfusablePair { a: 0, b: 1, overlap: 0.85 },
            ConfusablePair { a: 3, b: 4, overlap: 0.5 },
        ],
        cluster_spread: 1.0,
        seed: 7,
    };
    let data = generate(&spec)?;

    // per-class centroids show how close the paired clusters sit
    let d = data.feature_dim();
    let mut centroids = vec![vec![0.0; d]; data.class_count()];
    for (r, &label) in data.labels().iter().enumerate() {
        for (c, v) in centroids[label].iter_mut().zip(data.features().row(r)) {
            *c += v;
        }
    }
    let counts = data.class_counts();
    for (class, centroid) in centroids.iter_mut().enumerate() {
        centroid.iter_mut().for_each(|v| *v /= counts[class] as f64);
    }
    let dist = |a: usize, b: usize| -> f64 {
        centroids[a].iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    println!("{} samples, {} classes, sigma {}", data.len(), data.class_count(), spec.sample_stddev());
    println!("centroid distance 0-1 (overlap 0.85): {:.3}", dist(0, 1));
    println!("centroid distance 3-4 (overlap 0.5):  {:.3}", dist(3, 4));
    println!("centroid distance 0-2 (unpaired):     {:.3}", dist(0, 2));

    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic.cfds".into());
    save_dataset(&data, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
