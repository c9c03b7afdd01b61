use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::{Point, PointAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image_io;

/// One annotated image. `image` is `(1, C, H, W)` with C = 1 or 3.
#[derive(Clone, Debug)]
pub struct Entry {
    pub image: Tensor<f32>,
    pub annotation: PointAnnotation,
}

impl Entry {
    pub fn new(image: Tensor<f32>, annotation: PointAnnotation) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || !(s.c == 1 || s.c == 3) {
            return Err(Error::Data(format!(
                "{}: expected a single 1- or 3-channel image, got {s}",
                annotation.image_ref
            )));
        }
        annotation.validate(s.h, s.w)?;
        Ok(Entry { image, annotation })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn count(&self) -> usize {
        self.annotation.count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionMode {
    Fixed,
    Varied,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub name: String,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, entries: Vec<Entry>) -> Self {
        Dataset {
            name: name.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(Entry::count).sum()
    }

    pub fn resolution_mode(&self) -> ResolutionMode {
        let mut sizes = self.entries.iter().map(|e| (e.height(), e.width()));
        match sizes.next() {
            Some(first) if sizes.all(|s| s == first) => ResolutionMode::Fixed,
            None => ResolutionMode::Fixed,
            _ => ResolutionMode::Varied,
        }
    }

    pub fn mean_count(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.total_count() as f64 / self.len() as f64
        }
    }

    /// Entries at the given indices, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        Dataset::new(
            name,
            indices.iter().map(|&i| self.entries[i].clone()).collect(),
        )
    }
}

/// On-disk annotation record: image path relative to the annotation file,
/// and `[x, y]` pairs (column, row) in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

impl AnnotationRecord {
    pub fn from_annotation(a: &PointAnnotation) -> Self {
        AnnotationRecord {
            image: a.image_ref.clone(),
            points: a.points.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

/// Reads an annotation file and decodes every image it references.
/// `path` may name the JSON file or a directory containing
/// `annotations.json`.
pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let file = annotation_file(path);
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let records: Vec<AnnotationRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed annotations: {e}", file.display())))?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let image_path = root.join(&rec.image);
        let image = image_io::read_image(&image_path)
            .map_err(|e| Error::Data(format!("entry {i}: {e}")))?;
        let annotation = PointAnnotation {
            image_ref: rec.image,
            points: rec.points.iter().map(|&[x, y]| Point::new(x, y)).collect(),
        };
        entries.push(Entry::new(image, annotation).map_err(|e| Error::Data(format!("entry {i}: {e}")))?);
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset::new(name, entries))
}

pub fn annotation_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("annotations.json")
    } else {
        path.to_path_buf()
    }
}

/// Writes every image under `dir` (named by its `image_ref`) and the
/// matching `annotations.json`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(dataset.len());
    for e in &dataset.entries {
        image_io::write_image(&dir.join(&e.annotation.image_ref), &e.image)?;
        records.push(AnnotationRecord::from_annotation(&e.annotation));
    }
    let path = dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&records).expect("records serialize");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
