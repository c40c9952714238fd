//! Train briefly, predict a density map for one held-out target image, and
//! write both the binary density container and a color rendering under
//! `runs/predict_density/`.

use std::path::Path;

use treecount::cli::{load_density_map, save_density_map, save_density_viz};
use treecount::data::{generate_synthetic_with_sigma, DomainProfile, DomainTag};
use treecount::decoder::predict_density;
use treecount::encoder::htfe_forward;
use treecount::eval::density_to_array;
use treecount::trainer::{image_tensor, load_checkpoint, train_on_samples, TrainConfig};

fn main() {
    let source = generate_synthetic_with_sigma(
        &DomainProfile::source_default(),
        16,
        64,
        0,
        4.0,
        DomainTag::Source,
    );
    let target = generate_synthetic_with_sigma(
        &DomainProfile::target_default(),
        6,
        64,
        1,
        4.0,
        DomainTag::Target,
    );
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        k_shot: 3,
        crop_size: 64,
        checkpoint_every: 0,
        ..TrainConfig::toy(0)
    };
    let tmp = tempfile::tempdir().unwrap();
    let outcome = train_on_samples(&cfg, &source, &target, tmp.path(), None).unwrap();
    let (state, _) = load_checkpoint(&outcome.checkpoint).unwrap();

    let probe = &target[5];
    let density = ndgrad::no_grad(|| {
        let pyr = htfe_forward(&image_tensor::<f32>(&probe.image), &state.model.enc);
        predict_density(&pyr, &state.model.dec, (64, 64)).unwrap()
    });
    let arr = density_to_array(&density);

    let out = Path::new("runs/predict_density");
    std::fs::create_dir_all(out).unwrap();
    let dmp = out.join("prediction.dmp");
    save_density_map(&dmp, &arr).unwrap();
    save_density_viz(&out.join("prediction.png"), &arr).unwrap();

    let reloaded = load_density_map(&dmp).unwrap();
    let count: f64 = reloaded.iter().map(|&v| v as f64).sum();
    println!(
        "image {}: true count {}, predicted count {:.3}",
        probe.id,
        probe.points.len(),
        count
    );
    println!("density container + rendering under {}", out.display());
}
