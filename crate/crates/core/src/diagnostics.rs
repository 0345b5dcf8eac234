//! Diagnostics of what climbing does to a classifier: pixel amplification
//! ratios, input-gradient saliency and 2-D loss landscapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attribution::{normalize_grid, CamModel};
use crate::classifier::ClassifierModel;
use crate::climb::ClimbTrace;
use crate::error::{Error, Result};
use crate::graph::{input_gradient, Graph};
use crate::tensor::{Grid, Tensor};

/// Lower bound of the discriminative region on the normalized initial map.
pub const DISCRIMINATIVE_FROM: f64 = 0.5;
/// Lower bound (exclusive) of the non-discriminative region.
pub const NON_DISCRIMINATIVE_FROM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Discriminative,
    NonDiscriminative,
    Other,
}

pub fn region_of(initial_normalized: f64) -> Region {
    if initial_normalized >= DISCRIMINATIVE_FROM {
        Region::Discriminative
    } else if initial_normalized > NON_DISCRIMINATIVE_FROM {
        Region::NonDiscriminative
    } else {
        Region::Other
    }
}

/// Ratios `CAM(x^t)_i / CAM(x^0)_i` split by the region of each pixel.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Amplification {
    pub discriminative: Vec<f64>,
    pub non_discriminative: Vec<f64>,
}

impl Amplification {
    pub fn extend(&mut self, other: Amplification) {
        self.discriminative.extend(other.discriminative);
        self.non_discriminative.extend(other.non_discriminative);
    }

    pub fn median_discriminative(&self) -> Option<f64> {
        median(&self.discriminative)
    }

    pub fn median_non_discriminative(&self) -> Option<f64> {
        median(&self.non_discriminative)
    }
}

/// Amplification at step `t` of `trace`. Regions come from the normalized
/// initial map; ratios use the rectified maps.
pub fn pixel_amplification(trace: &ClimbTrace, t: usize) -> Result<Amplification> {
    let step = trace.steps.get(t).ok_or_else(|| {
        Error::invalid("pixel_amplification", format!("step {t} beyond trace of {}", trace.len()))
    })?;
    let initial = &trace.steps[0].cam;
    let regions = normalize_grid(initial);
    let mut out = Amplification::default();
    for i in 0..initial.data.len() {
        let c0 = initial.data[i];
        if c0 <= 0.0 {
            continue;
        }
        let s = step.cam.data[i] / c0;
        match region_of(regions.data[i]) {
            Region::Discriminative => out.discriminative.push(s),
            Region::NonDiscriminative => out.non_discriminative.push(s),
            Region::Other => {}
        }
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// `|∇_x y_c|`, maximized over channels and normalized to peak 1.
pub fn input_saliency(model: &impl CamModel, image: &Tensor, class: usize) -> Result<Grid<f64>> {
    let mut g = Graph::new();
    let x = g.variable(image.clone());
    let vars = model.build_cam(&mut g, x, class)?;
    let y = g.select(vars.logits, class)?;
    let grad = input_gradient(&g, y, x)?;
    let (_, c, h, w) = grad.dims4()?;
    let d = grad.data();
    let map = Grid::from_fn(h, w, |yy, xx| {
        (0..c).map(|ch| d[(ch * h + yy) * w + xx].abs()).fold(0.0, f64::max)
    });
    Ok(normalize_grid(&map))
}

/// A scalar function of the input image with its gradient.
pub trait InputLoss {
    fn loss(&self, x: &Tensor) -> Result<f64>;
    fn loss_and_gradient(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

/// Classification loss of a fixed label set.
pub struct ClassificationLoss<'a> {
    pub model: &'a ClassifierModel,
    pub labels: &'a [usize],
}

impl InputLoss for ClassificationLoss<'_> {
    fn loss(&self, x: &Tensor) -> Result<f64> {
        self.loss_and_gradient(x).map(|(l, _)| l)
    }

    fn loss_and_gradient(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let loss = self.model.classification_loss(&mut g, xv, self.labels)?;
        let grad = input_gradient(&g, loss, xv)?;
        Ok((g.value(loss).data()[0], grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Landscape {
    /// Offsets along each axis, symmetric about 0.
    pub coords: Vec<f64>,
    /// `values.at(i, j)` is the loss at `x + coords[i]·n + coords[j]·r`.
    pub values: Grid<f64>,
    pub radius: f64,
}

/// Loss over the plane spanned by the normalized loss gradient `n` and a
/// seeded random unit direction `r` orthogonal to it.
pub fn loss_landscape(f: &impl InputLoss, x: &Tensor, grid_n: usize, radius: f64, seed: u64) -> Result<Landscape> {
    if grid_n < 2 {
        return Err(Error::invalid("loss_landscape", "grid needs at least 2 points per axis"));
    }
    if !(radius >= 0.0) {
        return Err(Error::invalid("loss_landscape", "radius must be nonnegative"));
    }
    let (_, grad) = f.loss_and_gradient(x)?;
    let (n_dir, r_dir) = plane(&grad, seed);
    let coords: Vec<f64> = (0..grid_n)
        .map(|i| radius * (2.0 * i as f64 - (grid_n - 1) as f64) / (grid_n - 1) as f64)
        .collect();
    let mut values = Grid::filled(grid_n, grid_n, 0.0);
    for (i, &a) in coords.iter().enumerate() {
        for (j, &b) in coords.iter().enumerate() {
            let mut p = x.clone();
            p.axpy(a, &n_dir)?;
            p.axpy(b, &r_dir)?;
            *values.at_mut(i, j) = f.loss(&p)?;
        }
    }
    Ok(Landscape { coords, values, radius })
}

/// Unit gradient direction and an orthogonal unit random direction. A
/// vanishing gradient is replaced by a second random direction.
fn plane(grad: &Tensor, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = || Tensor::from_fn(grad.shape(), |_| StandardNormal.sample(&mut rng));
    let unit = |t: Tensor| {
        let norm = t.norm();
        t.map(|v| v / norm)
    };
    let n = if grad.norm() > 0.0 {
        unit(grad.clone())
    } else {
        unit(gaussian())
    };
    let mut r = gaussian();
    let along = r.dot(&n).expect("same shape");
    r.axpy(-along, &n).expect("same shape");
    (n, unit(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::CamVars;
    use crate::classifier::Architecture;
    use crate::climb::{run_climb, ClimbConfig};
    use crate::graph::{LossMode, Var};
    use rand::Rng;

    struct Linear {
        w: Tensor,
    }

    impl CamModel for Linear {
        fn num_classes(&self) -> usize {
            1
        }
        fn build_cam(&self, g: &mut Graph, image: Var, class: usize) -> Result<CamVars> {
            self.check_class(class)?;
            let w = g.constant(self.w.clone());
            let prod = g.mul(image, w)?;
            let logit = g.sum(prod);
            let logits = g.reshape(logit, &[1, 1])?;
            let (h, wd) = (self.w.shape()[2], self.w.shape()[3]);
            let raw_cam = g.reshape(prod, &[1, h, wd])?;
            Ok(CamVars { logits, raw_cam })
        }
    }

    struct Quadratic {
        center: Tensor,
        scale: f64,
    }

    impl InputLoss for Quadratic {
        fn loss(&self, x: &Tensor) -> Result<f64> {
            let d = x.zip_map(&self.center, |a, b| a - b)?;
            Ok(self.scale * d.dot(&d)?)
        }
        fn loss_and_gradient(&self, x: &Tensor) -> Result<(f64, Tensor)> {
            let d = x.zip_map(&self.center, |a, b| a - b)?;
            Ok((self.scale * d.dot(&d)?, d.map(|v| 2.0 * self.scale * v)))
        }
    }

    fn model(seed: u64) -> ClassifierModel {
        let mut arch = Architecture::new(1, 2);
        arch.channels = vec![4, 5];
        ClassifierModel::init(arch, LossMode::MultiLabel, vec!["a".into(), "b".into()], seed).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn regions_follow_bounds() {
        assert_eq!(region_of(0.5), Region::Discriminative);
        assert_eq!(region_of(0.4999), Region::NonDiscriminative);
        assert_eq!(region_of(0.1), Region::Other);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn amplification_at_start_is_one() {
        // an untrained net may rectify its whole map away; take the first
        // seed with some positive attribution
        let trace = (1..50)
            .map(|s| run_climb(&model(s), &image(2), 0, &ClimbConfig::default()).unwrap())
            .find(|t| t.steps[0].cam.max() > 0.0)
            .unwrap();
        let a = pixel_amplification(&trace, 0).unwrap();
        assert!(a.discriminative.iter().chain(&a.non_discriminative).all(|&s| s == 1.0));
        assert!(!a.discriminative.is_empty());
        assert!(pixel_amplification(&trace, 99).is_err());
    }

    #[test]
    fn constant_map_is_all_discriminative() {
        let lin = Linear {
            w: Tensor::full(&[1, 1, 3, 3], 1.0),
        };
        let x = Tensor::full(&[1, 1, 3, 3], 0.6);
        let trace = run_climb(&lin, &x, 0, &ClimbConfig::unregularized(2, 0.1)).unwrap();
        let a = pixel_amplification(&trace, 2).unwrap();
        assert_eq!(a.discriminative.len(), 9);
        assert!(a.non_discriminative.is_empty());
    }

    #[test]
    fn linear_saliency_is_abs_weight() {
        let w = Tensor::new(vec![1, 1, 2, 2], vec![-2.0, 1.0, 0.5, 0.0]).unwrap();
        let s = input_saliency(&Linear { w }, &Tensor::ones(&[1, 1, 2, 2]), 0).unwrap();
        assert_eq!(s.data, vec![1.0, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn saliency_matches_gradient_oracle() {
        let m = model(4);
        let x = image(5);
        let s = input_saliency(&m, &x, 1).unwrap();
        assert_eq!(s.max(), 1.0);
        // Central differences of y_1 per pixel.
        let h = 1e-6;
        let mut fd = Vec::new();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut q = x.clone();
            q.data_mut()[i] -= h;
            fd.push(((m.logits(&p).unwrap()[1] - m.logits(&q).unwrap()[1]) / (2.0 * h)).abs());
        }
        let peak = fd.iter().copied().fold(0.0, f64::max);
        for (a, b) in s.data.iter().zip(&fd) {
            assert!((a - b / peak).abs() < 1e-5);
        }
    }

    #[test]
    fn landscape_center_and_zero_radius() {
        let m = model(6);
        let x = image(7);
        let f = ClassificationLoss { model: &m, labels: &[1] };
        let l = loss_landscape(&f, &x, 5, 0.3, 0).unwrap();
        assert_eq!(l.coords[2], 0.0);
        assert_eq!(*l.values.at(2, 2), f.loss(&x).unwrap());
        let flat = loss_landscape(&f, &x, 4, 0.0, 0).unwrap();
        assert!(flat.values.data.iter().all(|&v| v == flat.values.data[0]));
        assert!(loss_landscape(&f, &x, 1, 0.3, 0).is_err());
    }

    #[test]
    fn quadratic_landscape_matches_paraboloid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let center = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
        let q = Quadratic { center: center.clone(), scale: 0.7 };
        let l = loss_landscape(&q, &x, 7, 0.5, 3).unwrap();
        // With d = x - c and n = d/|d|: f = s((|d| + a)^2 + b^2) since r ⟂ n.
        let d = x.zip_map(&center, |a, b| a - b).unwrap().norm();
        for (i, &a) in l.coords.iter().enumerate() {
            for (j, &b) in l.coords.iter().enumerate() {
                let want = 0.7 * ((d + a).powi(2) + b * b);
                assert!((l.values.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gradient_falls_back_to_random_plane() {
        let c = Tensor::zeros(&[1, 1, 3, 3]);
        let q = Quadratic { center: c.clone(), scale: 1.0 };
        let l = loss_landscape(&q, &c, 3, 1.0, 0).unwrap();
        assert_eq!(*l.values.at(1, 1), 0.0);
        assert!((l.values.at(0, 0) - 2.0).abs() < 1e-12);
    }
}
