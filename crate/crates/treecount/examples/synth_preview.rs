//! Generate a handful of samples from both built-in synthetic domains and
//! write them (plus density renderings) under `runs/synth_preview/`.

use std::path::Path;

use treecount::cli::save_density_viz;
use treecount::data::{
    generate_synthetic_with_sigma, save_dataset, DomainProfile, DomainTag,
};

fn main() {
    let out = Path::new("runs/synth_preview");
    for (name, profile, tag) in [
        ("source", DomainProfile::source_default(), DomainTag::Source),
        ("target", DomainProfile::target_default(), DomainTag::Target),
    ] {
        let samples = generate_synthetic_with_sigma(&profile, 6, 64, 7, 4.0, tag);
        let root = out.join(name);
        save_dataset(&samples, &root, "preview").expect("write dataset");
        for s in &samples {
            let viz = root.join("preview").join(format!("{}_density.png", s.id));
            save_density_viz(&viz, &s.density_gt).expect("write density viz");
        }
        let counts: Vec<usize> = samples.iter().map(|s| s.points.len()).collect();
        let mean_rgb: Vec<f32> = (0..3)
            .map(|c| {
                samples
                    .iter()
                    .map(|s| s.image.index_axis(ndarray::Axis(2), c).mean().unwrap())
                    .sum::<f32>()
                    / samples.len() as f32
            })
            .collect();
        println!(
            "{name}: counts {counts:?}, mean RGB ({:.3}, {:.3}, {:.3})",
            mean_rgb[0], mean_rgb[1], mean_rgb[2]
        );
    }
    println!("wrote previews under {}", out.display());
}
