//! Class activation maps: computation, rectification, normalization and
//! bilinear upsampling.

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Grid, Tensor};

/// Graph handles for a model evaluated on one image.
#[derive(Clone, Copy, Debug)]
pub struct CamVars {
    /// `[1, classes]`
    pub logits: Var,
    /// `[1, h, w]`, the bias-free class map before rectification.
    pub raw_cam: Var,
}

/// A classifier whose class evidence can be read as a spatial map.
pub trait CamModel {
    fn num_classes(&self) -> usize;

    /// Records logits and the raw class map for `class` on `g`.
    fn build_cam(&self, g: &mut Graph, image: Var, class: usize) -> Result<CamVars>;

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::invalid(
                "cam",
                format!("class {class} out of range for {} classes", self.num_classes()),
            ));
        }
        Ok(())
    }
}

impl CamModel for ClassifierModel {
    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn build_cam(&self, g: &mut Graph, image: Var, class: usize) -> Result<CamVars> {
        self.check_class(class)?;
        let out = self.build(g, image, false)?;
        let raw_cam = g.class_map(out.features, out.head_weight, class)?;
        Ok(CamVars {
            logits: out.logits,
            raw_cam,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Feature,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub class: usize,
    pub step: usize,
    pub values: Grid<f64>,
    pub normalized: bool,
    pub resolution: Resolution,
}

impl AttributionMap {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn max(&self) -> f64 {
        self.values.max()
    }

    /// Divides by the maximum; an all-zero map is returned unchanged.
    pub fn normalize(&self) -> AttributionMap {
        AttributionMap {
            values: normalize_grid(&self.values),
            normalized: true,
            ..self.clone()
        }
    }

    /// Bilinear, corner-aligned resampling to `(height, width)`.
    pub fn upsample(&self, height: usize, width: usize) -> Result<AttributionMap> {
        Ok(AttributionMap {
            values: upsample_bilinear(&self.values, height, width)?,
            resolution: Resolution::Image,
            ..self.clone()
        })
    }
}

pub fn normalize_grid(values: &Grid<f64>) -> Grid<f64> {
    let m = values.max();
    if m > 0.0 {
        values.map(|v| v / m)
    } else {
        values.clone()
    }
}

/// Raw (unrectified) class map and logits of `image [1, C, H, W]`.
pub fn raw_cam(model: &impl CamModel, image: &Tensor, class: usize) -> Result<(Grid<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let vars = model.build_cam(&mut g, x, class)?;
    let map = Grid::from_tensor(g.value(vars.raw_cam))?;
    Ok((map, g.value(vars.logits).data().to_vec()))
}

/// Rectified class activation map at feature resolution.
pub fn cam(model: &impl CamModel, image: &Tensor, class: usize) -> Result<AttributionMap> {
    let (raw, _) = raw_cam(model, image, class)?;
    Ok(AttributionMap {
        class,
        step: 0,
        values: raw.map(|v| v.max(0.0)),
        normalized: false,
        resolution: Resolution::Feature,
    })
}

pub fn upsample_bilinear(src: &Grid<f64>, height: usize, width: usize) -> Result<Grid<f64>> {
    let (h, w) = src.dims();
    if h == 0 || w == 0 || height < h || width < w {
        return Err(Error::invalid(
            "upsample",
            format!("cannot upsample {h}x{w} to {height}x{width}"),
        ));
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let pos = (i * (inp - 1)) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f64)
    };
    Ok(Grid::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = coord(y, height, h);
        let (x0, x1, fx) = coord(x, width, w);
        let top = src.at(y0, x0) * (1.0 - fx) + src.at(y0, x1) * fx;
        let bottom = src.at(y1, x0) * (1.0 - fx) + src.at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::graph::LossMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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
    fn zero_features_give_zero_map() {
        let mut m = model(1);
        for (k, b) in &mut m.convs {
            *k = Tensor::zeros(k.shape());
            *b = Tensor::zeros(b.shape());
        }
        let map = cam(&m, &image(2), 0).unwrap();
        assert!(map.values.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_weights_select_a_channel() {
        let mut m = model(3);
        let k = 2;
        m.head_weight = Tensor::from_fn(m.head_weight.shape(), |i| (i == 5 + k) as u8 as f64);
        let x = image(4);
        let (_, f) = m.forward(&x).unwrap();
        let map = cam(&m, &x, 1).unwrap();
        let (h, w) = map.dims();
        for i in 0..h * w {
            assert_eq!(map.values.data[i], f.data()[k * h * w + i].max(0.0));
        }
    }

    #[test]
    fn matches_per_pixel_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = model(6);
        m.head_weight = Tensor::from_fn(m.head_weight.shape(), |_| rng.random_range(-1.0..1.0));
        let x = image(7);
        let (_, f) = m.forward(&x).unwrap();
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        for class in 0..2 {
            let map = cam(&m, &x, class).unwrap();
            for y in 0..h {
                for xx in 0..w {
                    let dot: f64 = (0..c).map(|ch| m.head_weight.get(&[class, ch]) * f.get(&[ch, y, xx])).sum();
                    assert!((map.values.at(y, xx) - dot.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_class_is_rejected() {
        assert!(cam(&model(1), &image(1), 2).is_err());
    }

    #[test]
    fn gap_of_unrectified_cam_is_logit_minus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let mut m = model(10 + trial);
            m.head_bias = Tensor::from_fn(&[2], |_| rng.random_range(-2.0..2.0));
            let x = image(20 + trial);
            for class in 0..2 {
                let (raw, logits) = raw_cam(&m, &x, class).unwrap();
                let gap = raw.data.iter().sum::<f64>() / raw.data.len() as f64;
                assert!((gap - (logits[class] - m.head_bias.data()[class])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let g = Grid::from_vec(1, 3, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(normalize_grid(&g).data, vec![0.0, 0.5, 1.0]);
        let z = Grid::filled(2, 2, 0.0);
        assert_eq!(normalize_grid(&z), z);
    }

    #[test]
    fn upsample_examples() {
        let c = Grid::filled(3, 4, 0.7);
        let up = upsample_bilinear(&c, 9, 10).unwrap();
        assert!(up.data.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let row = Grid::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&row, 1, 3).unwrap();
        assert_eq!(up.data, vec![0.0, 0.5, 1.0]);

        assert!(upsample_bilinear(&c, 2, 4).is_err());
    }

    #[test]
    fn upsample_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Grid::from_fn(7, 7, |_, _| rng.random_range(0.0..1.0));
        let up = upsample_bilinear(&src, 28, 28).unwrap();
        for y in 0..28 {
            for x in 0..28 {
                // Corner-aligned source coordinates.
                let sy = y as f64 * 6.0 / 27.0;
                let sx = x as f64 * 6.0 / 27.0;
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(6), (x0 + 1).min(6));
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let want = src.at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                    + src.at(y0, x1) * (1.0 - dy) * dx
                    + src.at(y1, x0) * dy * (1.0 - dx)
                    + src.at(y1, x1) * dy * dx;
                assert!((up.at(y, x) - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_peaks_at_one(values in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let g = Grid::from_vec(1, values.len(), values).unwrap();
            let once = normalize_grid(&g);
            prop_assert_eq!(normalize_grid(&once), once.clone());
            if g.max() > 0.0 {
                prop_assert_eq!(once.max(), 1.0);
            }
            prop_assert!(once.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn upsample_stays_within_source_range(
            values in prop::collection::vec(-5.0f64..5.0, 12),
            h in 3usize..12, w in 4usize..15,
        ) {
            let src = Grid::from_vec(3, 4, values).unwrap();
            let up = upsample_bilinear(&src, h, w).unwrap();
            let lo = src.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = src.max();
            prop_assert!(up.data.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}
