//! Binary domain discriminator over generated density maps: VGG16-style
//! conv stages with max pooling, three fully connected layers and a 2-way
//! softmax head. Source class is index 0.

use ndgrad::init::{kaiming_normal, zeros};
use ndgrad::nn::linear;
use ndgrad::optim::ParamSet;
use ndgrad::{Element, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Profile;

#[derive(Debug, Error)]
pub enum DiscriminatorError {
    #[error("non-finite discriminator input")]
    NonFinite,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// 1 for density-only input; 4 concatenates the RGB image (ablation).
    pub input_channels: usize,
    pub stage_channels: [usize; 5],
    pub stage_convs: [usize; 5],
    pub fc_widths: [usize; 3],
    /// Densities are bilinearly resized to this square side before the first
    /// conv; must be divisible by 32 (five pooling stages).
    pub input_hw: usize,
    /// Fixed gain applied to the density plane. Per-tree kernels integrate
    /// to 1 so raw values sit near 0.01; the gain brings them to O(1).
    pub input_gain: f64,
}

impl DiscriminatorConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => DiscriminatorConfig {
                input_channels: 1,
                stage_channels: [64, 128, 256, 512, 512],
                stage_convs: [2, 2, 3, 3, 3],
                fc_widths: [4096, 4096, 2],
                input_hw: 256,
                input_gain: 64.0,
            },
            Profile::Toy => DiscriminatorConfig {
                input_channels: 1,
                stage_channels: [8, 16, 32, 64, 64],
                stage_convs: [2, 2, 3, 3, 3],
                fc_widths: [256, 64, 2],
                input_hw: 32,
                input_gain: 64.0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.input_hw % 32 != 0 {
            return Err("discriminator input side must be divisible by 32".into());
        }
        if self.fc_widths[2] != 2 {
            return Err("final head must be 2-way".into());
        }
        Ok(())
    }

    fn flat_len(&self) -> usize {
        let side = self.input_hw / 32;
        self.stage_channels[4] * side * side
    }
}

pub struct DiscriminatorParams<T: Element> {
    pub cfg: DiscriminatorConfig,
    pub stages: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
    pub fcs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> DiscriminatorParams<T> {
    pub fn init(cfg: &DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        cfg.validate().expect("invalid discriminator config");
        let mut stages = Vec::new();
        let mut c_in = cfg.input_channels;
        for (stage, (&c_out, &n_convs)) in cfg
            .stage_channels
            .iter()
            .zip(cfg.stage_convs.iter())
            .enumerate()
        {
            let _ = stage;
            let mut convs = Vec::new();
            for _ in 0..n_convs {
                convs.push((
                    kaiming_normal::<T, _>(rng, &[c_out, c_in, 3, 3], c_in * 9),
                    zeros(&[c_out]),
                ));
                c_in = c_out;
            }
            stages.push(convs);
        }
        let mut fcs = Vec::new();
        let mut f_in = cfg.flat_len();
        for &width in &cfg.fc_widths {
            fcs.push((kaiming_normal::<T, _>(rng, &[f_in, width], f_in), zeros(&[width])));
            f_in = width;
        }
        DiscriminatorParams { cfg: cfg.clone(), stages, fcs }
    }

    pub fn register(&self, set: &mut ParamSet<T>, prefix: &str) {
        for (s, convs) in self.stages.iter().enumerate() {
            for (i, (w, b)) in convs.iter().enumerate() {
                set.add(format!("{prefix}.s{s}.c{i}.w"), w.clone());
                set.add(format!("{prefix}.s{s}.c{i}.b"), b.clone());
            }
        }
        for (i, (w, b)) in self.fcs.iter().enumerate() {
            set.add(format!("{prefix}.fc{i}.w"), w.clone());
            set.add(format!("{prefix}.fc{i}.b"), b.clone());
        }
    }
}

/// Class probabilities `[p_source, p_target]` for one density map (`[H, W]`),
/// optionally concatenated with its RGB image (`[H, W, 3]`).
pub fn discriminate_probs<T: Element>(
    density: &Tensor<T>,
    image: Option<&Tensor<T>>,
    params: &DiscriminatorParams<T>,
) -> Result<Tensor<T>, DiscriminatorError> {
    if !density.data().iter().all(|v| v.is_finite()) {
        return Err(DiscriminatorError::NonFinite);
    }
    let cfg = &params.cfg;
    let sh = density.shape();
    let (h, w) = (sh[0], sh[1]);
    let side = cfg.input_hw;
    let mut planes = density.mul_scalar(cfg.input_gain).reshape(&[h, w, 1]);
    if let Some(img) = image {
        assert_eq!(cfg.input_channels, 4, "image input requires 4-channel config");
        planes = Tensor::concat(2, &[planes, img.clone()]);
    } else {
        assert_eq!(cfg.input_channels, 1, "density-only config expects 1 channel");
    }
    let resized = planes.bilinear_resize_hw(side, side);
    let mut x = resized
        .permute(&[2, 0, 1])
        .reshape(&[1, cfg.input_channels, side, side]);
    for convs in &params.stages {
        for (w, b) in convs {
            x = x.conv2d(w, Some(b), 1, 1).relu();
        }
        x = x.max_pool2d(2, 2);
    }
    let mut flat = x.reshape(&[1, cfg.flat_len()]);
    for (i, (w, b)) in params.fcs.iter().enumerate() {
        flat = linear(&flat, w, Some(b));
        if i + 1 < params.fcs.len() {
            flat = flat.relu();
        }
    }
    Ok(flat.reshape(&[2]).softmax_last())
}

/// Probability that the map comes from the source domain.
pub fn discriminate<T: Element>(
    density: &Tensor<T>,
    params: &DiscriminatorParams<T>,
) -> Result<Tensor<T>, DiscriminatorError> {
    Ok(discriminate_probs(density, None, params)?.slice_axis(0, 0, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{points_to_density, PointSet};
    use crate::losses::bce;
    use ndarray::{ArrayD, IxDyn};
    use ndgrad::no_grad;
    use ndgrad::optim::Sgd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            input_channels: 1,
            stage_channels: [4, 8, 16, 16, 16],
            stage_convs: [2, 2, 3, 3, 3],
            fc_widths: [32, 16, 2],
            input_hw: 32,
            input_gain: 64.0,
        }
    }

    fn rand_density(rng: &mut ChaCha8Rng, n_points: usize, size: usize) -> Tensor<f32> {
        let pts: Vec<(f32, f32)> = (0..n_points)
            .map(|_| {
                (
                    rng.gen_range(0.0..size as f32 - 1.0),
                    rng.gen_range(0.0..size as f32 - 1.0),
                )
            })
            .collect();
        let d = points_to_density(&PointSet::new(pts), size, size, 2.0).unwrap();
        Tensor::constant(d.mapv(|v| v).into_dyn())
    }

    #[test]
    fn probabilities_in_range_and_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = DiscriminatorParams::<f32>::init(&tiny_cfg(), &mut rng);
        for i in 0..5 {
            let d = rand_density(&mut rng, 3 + i, 40);
            let probs = no_grad(|| discriminate_probs(&d, None, &params)).unwrap();
            let p = probs.to_array();
            assert!((p[[0]] + p[[1]] - 1.0).abs() < 1e-6);
            let ps = no_grad(|| discriminate(&d, &params)).unwrap();
            assert!(ps.value() > 0.0 && ps.value() < 1.0);
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DiscriminatorParams::<f32>::init(&tiny_cfg(), &mut rng);
        let bad = Tensor::constant(ArrayD::from_elem(IxDyn(&[8, 8]), f32::NAN));
        assert!(matches!(
            discriminate(&bad, &params),
            Err(DiscriminatorError::NonFinite)
        ));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DiscriminatorParams::<f32>::init(&tiny_cfg(), &mut rng);
        let d = rand_density(&mut rng, 5, 32);
        let a = no_grad(|| discriminate(&d, &params)).unwrap().value();
        let b = no_grad(|| discriminate(&d, &params)).unwrap().value();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradient_on_fc_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DiscriminatorParams::<f64>::init(&tiny_cfg(), &mut rng);
        let mut a = ArrayD::<f64>::zeros(IxDyn(&[32, 32]));
        for v in a.iter_mut() {
            *v = rng.gen_range(0.0..0.3);
        }
        let d = Tensor::constant(a);
        let readout = || bce(&discriminate(&d, &params).unwrap(), 1.0);
        let loss = readout();
        loss.backward();
        let target = &params.fcs[1].0;
        let analytic = target.grad().unwrap().as_slice().unwrap()[7];
        let h = 1e-6;
        let orig = target.data().as_slice().unwrap()[7];
        target.data_mut().as_slice_mut().unwrap()[7] = orig + h;
        let fp = readout().value();
        target.data_mut().as_slice_mut().unwrap()[7] = orig - h;
        let fm = readout().value();
        target.data_mut().as_slice_mut().unwrap()[7] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-6);
        assert!(
            (fd - analytic).abs() / denom < 1e-3,
            "fd {fd:.4e} analytic {analytic:.4e}"
        );
    }

    #[test]
    fn overfits_twenty_density_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DiscriminatorParams::<f32>::init(&tiny_cfg(), &mut rng);
        let mut set = ParamSet::new();
        params.register(&mut set, "d");
        let opt = Sgd::new(0.05);
        // source maps: sparse small-sigma; target maps: dense
        let sources: Vec<Tensor<f32>> =
            (0..10).map(|_| rand_density(&mut rng, 3, 32)).collect();
        let targets: Vec<Tensor<f32>> =
            (0..10).map(|_| rand_density(&mut rng, 14, 32)).collect();
        for _ in 0..200 {
            // two samples per step keeps the oracle cheap
            let i = rng.gen_range(0..10);
            let s = &sources[i];
            let t = &targets[i];
            let loss = bce(&discriminate(s, &params).unwrap(), 1.0)
                .add(&bce(&discriminate(t, &params).unwrap(), 0.0));
            loss.backward();
            opt.step(&set);
        }
        let mut correct = 0;
        for s in &sources {
            if no_grad(|| discriminate(s, &params)).unwrap().value() > 0.5 {
                correct += 1;
            }
        }
        for t in &targets {
            if no_grad(|| discriminate(t, &params)).unwrap().value() < 0.5 {
                correct += 1;
            }
        }
        assert!(correct >= 19, "training accuracy {correct}/20");
    }
}
