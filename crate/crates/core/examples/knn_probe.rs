//! KNN and linear probes on raw pixels of the synthetic dataset, the baseline a
//! trained backbone should beat. Also round-trips the features through the
//! on-disk format used by `pwself eval --export`.
//!
//! ```text
//! cargo run --release --example knn_probe
//! ```

use pwself::eval::{export_features, import_features, knn_classify, linear_probe, FeatureSet, ProbeConfig};
use pwself::imagedata::{synthetic_dataset, LabeledDataset, Rng};

/// Raw pixels plus Gaussian noise of standard deviation `noise`.
fn pixels(d: &LabeledDataset, noise: f64, rng: &mut Rng) -> pwself::Result<FeatureSet> {
    let dim = d.images[0].data().len();
    let data = d
        .images
        .iter()
        .flat_map(|im| im.data().iter().copied())
        .map(|v| v + (noise * rng.normal()) as f32)
        .collect();
    FeatureSet::new(dim, data, d.labels.clone(), d.class_count)
}

fn main() -> pwself::Result<()> {
    let train_data = synthetic_dataset(1000, 10, 16, 0)?;
    let test_data = synthetic_dataset(300, 10, 16, 1)?;
    let mut rng = Rng::new(2);
    let probe = ProbeConfig {
        epochs: 50,
        ..ProbeConfig::default()
    };
    let mlp = ProbeConfig {
        hidden: vec![64],
        ..probe.clone()
    };
    let mut test = None;
    for noise in [0.0, 1.0, 3.0] {
        let train = pixels(&train_data, noise, &mut rng)?;
        let t = pixels(&test_data, noise, &mut rng)?;
        println!(
            "noise {noise}: knn@10 {:.3}, knn@20 {:.3}, linear {:.3}, mlp(64) {:.3}",
            knn_classify(&train, &t, 10)?,
            knn_classify(&train, &t, 20)?,
            linear_probe(&train, &t, &probe)?,
            linear_probe(&train, &t, &mlp)?
        );
        test = Some(t);
    }
    let test = test.expect("at least one noise level");

    let dir = std::env::temp_dir().join("pwself-knn-probe");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join("test.manifest");
    export_features(&test, &path)?;
    let back = import_features(&path)?;
    assert_eq!(back.data, test.data);
    println!(
        "exported and reloaded {} test features from {}",
        back.len(),
        path.display()
    );
    Ok(())
}
