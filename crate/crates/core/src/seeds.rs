//! Segmentation seeds and pseudo ground truth from localization maps.

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::eval::seg::ConfusionCounts;
use crate::tensor::Grid;

pub const BACKGROUND: u8 = 0;
pub const AMBIGUOUS: u8 = 255;

/// Per-pixel labels: `0` background, `class + 1` for object classes and
/// [`AMBIGUOUS`] for pixels to ignore.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedMask {
    pub labels: Grid<u8>,
    pub threshold: Option<f64>,
}

impl SeedMask {
    pub fn new(labels: Grid<u8>) -> Self {
        SeedMask {
            labels,
            threshold: None,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        let l = self.labels.data[i];
        l != BACKGROUND && l != AMBIGUOUS
    }
}

/// Label of an object class in a [`SeedMask`].
pub fn class_label(class: usize) -> u8 {
    u8::try_from(class + 1)
        .ok()
        .filter(|&l| l != AMBIGUOUS)
        .expect("class ids must fit below the ambiguous label")
}

/// Each pixel takes the class whose map is largest among those exceeding
/// `theta`; background otherwise. Ties go to the lowest class id.
pub fn seed_from_maps(maps: &[AttributionMap], theta: f64) -> Result<SeedMask> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("seed_from_maps", "no localization maps given"))?;
    let (h, w) = first.dims();
    if let Some(m) = maps.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::shape("seed_from_maps", &[h, w], &[m.dims().0, m.dims().1]));
    }
    let mut order: Vec<&AttributionMap> = maps.iter().collect();
    order.sort_by_key(|m| m.class);
    let mut labels = Grid::filled(h, w, BACKGROUND);
    for i in 0..h * w {
        let mut best: Option<(f64, usize)> = None;
        for m in &order {
            let v = m.values.data[i];
            if v > theta && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, m.class));
            }
        }
        if let Some((_, class)) = best {
            labels.data[i] = class_label(class);
        }
    }
    Ok(SeedMask {
        labels,
        threshold: Some(theta),
    })
}

/// Foreground pixels the saliency map calls background, and background
/// pixels it calls foreground, become ambiguous.
pub fn pseudo_gt_with_saliency(seed: &SeedMask, saliency_fg: &Grid<bool>) -> Result<SeedMask> {
    if !seed.labels.same_dims(saliency_fg) {
        return Err(Error::shape(
            "pseudo_gt_with_saliency",
            &[seed.labels.height, seed.labels.width],
            &[saliency_fg.height, saliency_fg.width],
        ));
    }
    let mut out = seed.clone();
    for (l, &sal) in out.labels.data.iter_mut().zip(&saliency_fg.data) {
        let conflict = match *l {
            AMBIGUOUS => false,
            BACKGROUND => sal,
            _ => !sal,
        };
        if conflict {
            *l = AMBIGUOUS;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub best_theta: f64,
    pub best_miou: f64,
    /// `(theta, mIoU)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Dataset mIoU of the seeds at each threshold; returns the best one
/// (smallest threshold on ties). `maps[i]` holds the per-class maps of
/// image `i`; an image without maps is seeded as all background.
pub fn best_threshold_sweep(
    maps: &[Vec<AttributionMap>],
    gt: &[SeedMask],
    classes: usize,
    theta_grid: &[f64],
) -> Result<ThresholdSweep> {
    if theta_grid.is_empty() {
        return Err(Error::invalid("best_threshold_sweep", "threshold grid is empty"));
    }
    if maps.len() != gt.len() {
        return Err(Error::invalid(
            "best_threshold_sweep",
            format!("{} map sets for {} ground-truth masks", maps.len(), gt.len()),
        ));
    }
    let mut curve = Vec::with_capacity(theta_grid.len());
    for &theta in theta_grid {
        let mut counts = ConfusionCounts::new(classes);
        for (item_maps, truth) in maps.iter().zip(gt) {
            let seed = seed_or_background(item_maps, truth, theta)?;
            counts.add(&seed, truth)?;
        }
        curve.push((theta, counts.miou().mean));
    }
    let mut best = curve[0];
    for &(t, v) in &curve[1..] {
        if v > best.1 || (v == best.1 && t < best.0) {
            best = (t, v);
        }
    }
    Ok(ThresholdSweep {
        best_theta: best.0,
        best_miou: best.1,
        curve,
    })
}

pub(crate) fn seed_or_background(maps: &[AttributionMap], truth: &SeedMask, theta: f64) -> Result<SeedMask> {
    if maps.is_empty() {
        Ok(SeedMask {
            labels: Grid::filled(truth.labels.height, truth.labels.width, BACKGROUND),
            threshold: Some(theta),
        })
    } else {
        seed_from_maps(maps, theta)
    }
}

/// `0.05, 0.10, …, 0.95`
pub fn default_theta_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}
