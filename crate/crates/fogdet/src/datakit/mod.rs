//! Dataset plumbing: annotation ingestion and filtering, toy scene
//! generation, paired clean/foggy sample assembly, and the on-disk
//! dataset layout shared by the generation and training commands.

pub mod batch;
pub mod toy;
pub mod voc;

pub use batch::{
    assemble_batch, letterbox, map_box, shuffled_batches, unmap_box, Batch, BatchIterator,
    LetterboxMapping,
};
pub use toy::{generate_toy_scene, SceneConfig, ToyScene, TOY_CLASS_NAMES};
pub use voc::{parse_voc_annotation, write_voc_xml, VocParse};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::detection::GtBox;
use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::weathersim::{apply_fog, FogParams};

/// Ground-truth boxes of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<GtBox>,
}

impl Annotation {
    /// Errors unless every box is properly ordered and inside the image.
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let bb = &b.bbox;
            let ok = bb.x_min < bb.x_max
                && bb.y_min < bb.y_max
                && bb.x_min >= 0.0
                && bb.y_min >= 0.0
                && bb.x_max <= self.width as f32
                && bb.y_max <= self.height as f32;
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "box {i} of image {} is degenerate or out of bounds: \
                     ({}, {}, {}, {}) in {}x{}",
                    self.image_id, bb.x_min, bb.y_min, bb.x_max, bb.y_max, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Keeps only boxes whose class is in `keep`, remapping each class id to
/// its position in `keep`.
pub fn filter_classes(ann: &Annotation, keep: &[usize]) -> Annotation {
    let boxes = ann
        .boxes
        .iter()
        .filter_map(|b| {
            keep.iter().position(|&k| k == b.class_id).map(|new_id| GtBox {
                class_id: new_id,
                bbox: b.bbox,
            })
        })
        .collect();
    Annotation {
        image_id: ann.image_id.clone(),
        width: ann.width,
        height: ann.height,
        boxes,
    }
}

/// A clean image, its fogged twin, and the shared annotation.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub foggy: ImageTensor,
    pub clean: ImageTensor,
    pub annotation: Annotation,
    pub fog: FogParams,
}

/// Fogs `clean` and bundles the pair. Boxes are untouched: fog changes
/// pixel values, not geometry.
pub fn make_paired_sample(
    clean: ImageTensor,
    annotation: Annotation,
    fog: FogParams,
) -> Result<PairedSample> {
    annotation.validate()?;
    let foggy = apply_fog(&clean, &fog)?;
    Ok(PairedSample {
        foggy,
        clean,
        annotation,
        fog,
    })
}

/// On-disk dataset: `classes.txt`, `index.tsv`, `fog.tsv`, and per-sample
/// `images/{id}.png` (foggy), `clean/{id}.png`, `annotations/{id}.xml`.
#[derive(Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    fog: BTreeMap<String, FogParams>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_str(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl DiskDataset {
    /// Creates the directory skeleton and class list for a new dataset.
    pub fn create(root: impl Into<PathBuf>, classes: &[String]) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument("class list is empty".into()));
        }
        let root = root.into();
        for sub in ["images", "clean", "annotations"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_str(&root.join("classes.txt"), &(classes.join("\n") + "\n"))?;
        Ok(DiskDataset {
            root,
            classes: classes.to_vec(),
            ids: Vec::new(),
            fog: BTreeMap::new(),
        })
    }

    /// Writes one sample's images and annotation; `save_index` must be
    /// called once all samples are added.
    pub fn add_sample(&mut self, sample: &PairedSample) -> Result<()> {
        let id = sample.annotation.image_id.clone();
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::InvalidArgument(format!(
                "sample id {id:?} must be nonempty [A-Za-z0-9_]"
            )));
        }
        if self.fog.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate sample id {id}")));
        }
        sample.foggy.save(self.root.join(format!("images/{id}.png")))?;
        sample.clean.save(self.root.join(format!("clean/{id}.png")))?;
        write_str(
            &self.root.join(format!("annotations/{id}.xml")),
            &write_voc_xml(&sample.annotation, &self.classes)?,
        )?;
        self.ids.push(id.clone());
        self.fog.insert(id, sample.fog);
        Ok(())
    }

    /// Writes `index.tsv` and `fog.tsv` reflecting the added samples.
    pub fn save_index(&self) -> Result<()> {
        let mut index = String::new();
        let mut fog = String::new();
        for id in &self.ids {
            index.push_str(id);
            index.push('\n');
            let p = &self.fog[id];
            fog.push_str(&format!("{id}\t{}\t{}\n", p.atmospheric_light, p.beta));
        }
        write_str(&self.root.join("index.tsv"), &index)?;
        write_str(&self.root.join("fog.tsv"), &fog)
    }

    /// Opens an existing dataset directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let classes: Vec<String> = read_to_string(&root.join("classes.txt"))?
            .lines()
            .map(str::to_string)
            .filter(|l| !l.is_empty())
            .collect();
        if classes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{}: classes.txt is empty",
                root.display()
            )));
        }
        let ids: Vec<String> = read_to_string(&root.join("index.tsv"))?
            .lines()
            .map(str::to_string)
            .filter(|l| !l.is_empty())
            .collect();
        let mut fog = BTreeMap::new();
        for (ln, line) in read_to_string(&root.join("fog.tsv"))?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = || {
                Error::InvalidArgument(format!(
                    "fog.tsv line {}: expected id\\tA\\tbeta, got {line:?}",
                    ln + 1
                ))
            };
            let [id, a, beta] = parts.as_slice() else {
                return Err(bad());
            };
            let a: f64 = a.parse().map_err(|_| bad())?;
            let beta: f64 = beta.parse().map_err(|_| bad())?;
            fog.insert(id.to_string(), FogParams::new(a, beta)?);
        }
        for id in &ids {
            if !fog.contains_key(id) {
                return Err(Error::InvalidArgument(format!(
                    "sample {id} is in index.tsv but missing from fog.tsv"
                )));
            }
        }
        Ok(DiskDataset {
            root,
            classes,
            ids,
            fog,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Loads one sample by index position.
    pub fn load_sample(&self, index: usize) -> Result<PairedSample> {
        let id = self.ids.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "sample index {index} out of range ({} samples)",
                self.len()
            ))
        })?;
        let foggy = ImageTensor::load(self.root.join(format!("images/{id}.png")))?;
        let clean = ImageTensor::load(self.root.join(format!("clean/{id}.png")))?;
        let ann_path = self.root.join(format!("annotations/{id}.xml"));
        let parsed = parse_voc_annotation(
            &ann_path.display().to_string(),
            &read_to_string(&ann_path)?,
            &self.classes,
        )?;
        Ok(PairedSample {
            foggy,
            clean,
            annotation: parsed.annotation,
            fog: self.fog[id],
        })
    }

    /// Loads every sample, in index order.
    pub fn load_all(&self) -> Result<Vec<PairedSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt(class_id: usize, x0: f32, y0: f32, x1: f32, y1: f32) -> GtBox {
        GtBox {
            class_id,
            bbox: BBox {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            },
        }
    }

    fn mixed_annotation() -> Annotation {
        Annotation {
            image_id: "img".into(),
            width: 100,
            height: 80,
            boxes: vec![
                gt(0, 1.0, 2.0, 11.0, 12.0),
                gt(1, 20.0, 20.0, 30.0, 32.0),
                gt(2, 40.0, 5.0, 52.0, 15.0),
                gt(1, 60.0, 50.0, 70.0, 60.0),
            ],
        }
    }

    #[test]
    fn filter_remaps_to_keep_order_and_preserves_box_order() {
        let ann = mixed_annotation();
        let kept = filter_classes(&ann, &[2, 1]);
        assert_eq!(kept.boxes.len(), 3);
        assert_eq!(kept.boxes[0].class_id, 1);
        assert_eq!(kept.boxes[0].bbox, ann.boxes[1].bbox);
        assert_eq!(kept.boxes[1].class_id, 0);
        assert_eq!(kept.boxes[1].bbox, ann.boxes[2].bbox);
        assert_eq!(kept.boxes[2].class_id, 1);

        let nothing = filter_classes(&ann, &[7]);
        assert!(nothing.boxes.is_empty());
    }

    #[test]
    fn filtering_twice_equals_filtering_once() {
        let ann = mixed_annotation();
        let once = filter_classes(&ann, &[0, 1]);
        let twice = filter_classes(&once, &[0, 1]);
        assert_eq!(once, twice);
    }

    #[test]
    fn paired_sample_with_zero_beta_is_identity() {
        let clean = ImageTensor::new_unit(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            (c as f32 + y as f32 + x as f32) / 20.0
        }));
        let ann = Annotation {
            image_id: "a".into(),
            width: 8,
            height: 8,
            boxes: vec![gt(0, 1.0, 1.0, 4.0, 4.0)],
        };
        let fog = FogParams::new(0.5, 0.0).unwrap();
        let pair = make_paired_sample(clean.clone(), ann.clone(), fog).unwrap();
        assert_eq!(pair.foggy.data, clean.data);
        assert_eq!(pair.annotation, ann);
    }

    #[test]
    fn paired_sample_rejects_out_of_bounds_boxes() {
        let clean = ImageTensor::new_unit(Array3::zeros((3, 8, 8)));
        let ann = Annotation {
            image_id: "a".into(),
            width: 8,
            height: 8,
            boxes: vec![gt(0, 1.0, 1.0, 9.0, 4.0)],
        };
        let fog = FogParams::new(0.5, 0.1).unwrap();
        assert!(make_paired_sample(clean, ann, fog).is_err());
    }

    #[test]
    fn disk_round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let classes: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let mut ds = DiskDataset::create(dir.path(), &classes).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cfg = SceneConfig::default();
        let mut originals = Vec::new();
        for i in 0..3 {
            let scene = generate_toy_scene(&mut rng, &cfg, &format!("img_{i:04}")).unwrap();
            let fog = FogParams::new(0.5, 0.08 + 0.01 * i as f64).unwrap();
            let pair = make_paired_sample(scene.image, scene.annotation, fog).unwrap();
            ds.add_sample(&pair).unwrap();
            originals.push(pair);
        }
        ds.save_index().unwrap();

        let reopened = DiskDataset::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 3);
        assert_eq!(reopened.classes, classes);
        for (i, orig) in originals.iter().enumerate() {
            let got = ds_sample_quantized(&reopened, i);
            assert_eq!(got.annotation, orig.annotation);
            assert_eq!(got.fog, orig.fog);
            let q = |t: &ImageTensor| t.data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round());
            assert_eq!(q(&got.clean), q(&orig.clean));
            assert_eq!(q(&got.foggy), q(&orig.foggy));
        }
    }

    fn ds_sample_quantized(ds: &DiskDataset, i: usize) -> PairedSample {
        ds.load_sample(i).unwrap()
    }

    #[test]
    fn open_rejects_missing_fog_entries() {
        let dir = tempfile::tempdir().unwrap();
        let classes: Vec<String> = vec!["box".into()];
        let ds = DiskDataset::create(dir.path(), &classes).unwrap();
        ds.save_index().unwrap();
        std::fs::write(dir.path().join("index.tsv"), "ghost\n").unwrap();
        let err = DiskDataset::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }
}
