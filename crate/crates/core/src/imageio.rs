//! PNG files for images, label masks and saliency masks, and the dataset
//! manifest.
//!
//! Images are stored as 8-bit PNG; a value `v` in `[0, 1]` is written as
//! `round(255 v)`, so images already quantized to multiples of 1/255 load
//! back exactly. Label masks are 8-bit grayscale PNG holding the raw label
//! ids, saliency masks store foreground as 255.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::seeds::SeedMask;
use crate::synth::{SceneObject, SynthConfig, SyntheticScene};
use crate::tensor::{Grid, Tensor};

pub const MANIFEST_SCHEMA: u32 = 1;

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn save_buffer<P: image::PixelWithColorType>(img: &ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    ensure_parent(path)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn save_rgb(img: &image::RgbImage, path: &Path) -> Result<()> {
    save_buffer(img, path)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[1, C, H, W]` with `C` of 1 or 3.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || (c != 1 && c != 3) {
        return Err(Error::shape("save_image", t.shape(), &[1, 3, h, w]));
    }
    let d = t.data();
    let (hw, wu) = (h * w, w as u32);
    if c == 1 {
        let img = GrayImage::from_fn(wu, h as u32, |x, y| Luma([to_byte(d[y as usize * w + x as usize])]));
        save_buffer(&img, path)
    } else {
        let img = RgbImage::from_fn(wu, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([to_byte(d[i]), to_byte(d[hw + i]), to_byte(d[2 * hw + i])])
        });
        save_buffer(&img, path)
    }
}

/// Loads an image as `[1, channels, H, W]`, converting colour as needed.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => {
            let raw = img.to_rgb8().into_raw();
            (0..3)
                .flat_map(|ch| raw.iter().skip(ch).step_by(3).map(|&v| v as f64 / 255.0).collect::<Vec<_>>())
                .collect()
        }
        _ => return Err(Error::invalid("load_image", format!("unsupported channel count {channels}"))),
    };
    Tensor::new(vec![1, channels, h, w], data)
}

pub fn save_labels(mask: &Grid<u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_raw(w as u32, h as u32, mask.data.clone()).expect("buffer matches extents");
    save_buffer(&img, path)
}

pub fn load_labels(path: &Path) -> Result<Grid<u8>> {
    let img = open(path)?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("label masks must be 8-bit grayscale, found {:?}", img.color()),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(h, w, img.into_luma8().into_raw())
}

pub fn save_seed(seed: &SeedMask, path: &Path) -> Result<()> {
    save_labels(&seed.labels, path)
}

pub fn load_seed(path: &Path) -> Result<SeedMask> {
    Ok(SeedMask::new(load_labels(path)?))
}

pub fn save_saliency(mask: &Grid<bool>, path: &Path) -> Result<()> {
    save_labels(&mask.map(|&b| if b { 255 } else { 0 }), path)
}

/// Any nonzero pixel is foreground.
pub fn load_saliency(path: &Path) -> Result<Grid<bool>> {
    Ok(load_labels(path)?.map(|&v| v != 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub parts: PathBuf,
    pub saliency: PathBuf,
    pub labels: Vec<usize>,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub split: String,
    pub class_names: Vec<String>,
    pub generator: SynthConfig,
    pub seed: u64,
    /// Paths are relative to the manifest's directory.
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(path)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "{}: unsupported manifest schema {}",
                path.display(),
                m.schema
            )));
        }
        Ok(m)
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class{c}")).collect()
}

/// Writes every scene under `dir` and the manifest as
/// `dir/manifest.json`.
pub fn save_dataset(dir: &Path, split: &str, cfg: &SynthConfig, scenes: &[SyntheticScene]) -> Result<DatasetManifest> {
    let mut items = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("{i:05}.png");
        let item = ManifestItem {
            image: Path::new("images").join(&name),
            mask: Path::new("masks").join(&name),
            parts: Path::new("parts").join(&name),
            saliency: Path::new("saliency").join(&name),
            labels: s.labels.clone(),
            objects: s.objects.clone(),
            seed: s.seed,
        };
        save_image(&s.image, &dir.join(&item.image))?;
        save_labels(&s.mask, &dir.join(&item.mask))?;
        save_labels(&s.parts, &dir.join(&item.parts))?;
        save_saliency(&s.saliency, &dir.join(&item.saliency))?;
        items.push(item);
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA,
        split: split.to_string(),
        class_names: class_names(cfg.classes),
        generator: cfg.clone(),
        seed: cfg.seed,
        items,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.manifest.class_names.len()
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let channels = manifest.generator.channels;
    let scenes = manifest
        .items
        .iter()
        .map(|it| {
            let mask = load_labels(&root.join(&it.mask))?;
            let saliency = load_saliency(&root.join(&it.saliency))?;
            let parts = load_labels(&root.join(&it.parts))?;
            Ok(SyntheticScene {
                image: load_image(&root.join(&it.image), channels)?,
                mask,
                parts,
                labels: it.labels.clone(),
                objects: it.objects.clone(),
                saliency,
                seed: it.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, root, scenes })
}

/// Bounding boxes of a manifest item, one per object.
pub fn item_boxes(item: &ManifestItem) -> Vec<BBox> {
    item.objects.iter().map(|o| o.bbox).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;
    use proptest::prelude::*;

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let scenes = generate(&cfg, 6).unwrap();
        save_dataset(dir.path(), "train", &cfg, &scenes).unwrap();
        let back = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.scenes, scenes);
        assert_eq!(back.classes(), 3);
    }

    #[test]
    fn rgb_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[1, 3, 4, 5], |i| ((i * 37) % 256) as f64 / 255.0);
        let p = dir.path().join("x.png");
        save_image(&t, &p).unwrap();
        assert_eq!(load_image(&p, 3).unwrap(), t);
    }

    #[test]
    fn truncated_png_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        save_labels(&Grid::filled(4, 4, 3), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_labels(&p).unwrap_err();
        assert!(err.to_string().contains("m.png"), "{err}");
    }

    #[test]
    fn colour_label_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_image(&Tensor::zeros(&[1, 3, 2, 2]), &p).unwrap();
        assert!(matches!(load_labels(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_seed(Path::new("/nonexistent/seed.png")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn seed_mask_roundtrip(h in 1usize..10, w in 1usize..10, values in prop::collection::vec(any::<u8>(), 100)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.png");
            let seed = SeedMask::new(Grid::from_vec(h, w, values[..h * w].to_vec()).unwrap());
            save_seed(&seed, &p).unwrap();
            prop_assert_eq!(load_seed(&p).unwrap(), seed);
        }
    }
}
