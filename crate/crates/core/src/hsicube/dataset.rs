use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_cube, read_labels, ClassTable, Datacube, LabelMap, Modality, IGNORE};
use crate::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Label file path, relative to the dataset root.
    pub labels: String,
    /// Cube file per modality, relative to the dataset root.
    pub cubes: BTreeMap<Modality, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub images: Vec<ImageRecord>,
}

/// On-disk dataset: subjects ("pigs") with their image records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(skip)]
    pub root: PathBuf,
    pub subjects: Vec<SubjectRecord>,
}

/// One decoded image: the cube of the requested modality, the RGB companion
/// (needed for superpixels) and the reference labels.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub subject: String,
    pub image: String,
    pub cube: Datacube,
    pub rgb: Option<Datacube>,
    pub labels: LabelMap,
}

impl DatasetIndex {
    pub fn new(root: impl Into<PathBuf>, subjects: Vec<SubjectRecord>) -> Result<Self> {
        let index = Self {
            root: root.into(),
            subjects,
        };
        index.check_ids()?;
        Ok(index)
    }

    fn check_ids(&self) -> Result<()> {
        for (i, s) in self.subjects.iter().enumerate() {
            if self.subjects[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::InvalidData(format!("duplicate subject id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Loads `index.json` from `dir` and checks that every referenced file parses.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let index = Self::load_unchecked(dir)?;
        index.validate()?;
        Ok(index)
    }

    pub fn load_unchecked(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut index: DatasetIndex = serde_json::from_str(&text)?;
        index.root = dir.to_path_buf();
        index.check_ids()?;
        Ok(index)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_classes(&self) -> Result<ClassTable> {
        let path = self.root.join(CLASSES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        ClassTable::new(serde_json::from_str::<ClassTable>(&text)?.classes)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            for img in &s.images {
                let labels = read_labels(self.root.join(&img.labels))?;
                for path in img.cubes.values() {
                    let cube = read_cube(self.root.join(path))?;
                    if cube.width() != labels.width() || cube.height() != labels.height() {
                        return Err(Error::DimensionMismatch(format!(
                            "{path} is {}x{}, labels are {}x{}",
                            cube.width(),
                            cube.height(),
                            labels.width(),
                            labels.height()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.subjects.iter().map(|s| s.images.len()).sum()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn labels_path(&self, rec: &ImageRecord) -> PathBuf {
        self.root.join(&rec.labels)
    }

    pub fn cube_path(&self, rec: &ImageRecord, modality: Modality) -> Result<PathBuf> {
        rec.cubes
            .get(&modality)
            .map(|p| self.root.join(p))
            .ok_or_else(|| Error::InvalidData(format!("image {} has no {modality} cube", rec.id)))
    }

    /// Decodes one image. The RGB companion is loaded only when `with_rgb` is set.
    pub fn load_image(
        &self,
        subject: &SubjectRecord,
        rec: &ImageRecord,
        modality: Modality,
        with_rgb: bool,
    ) -> Result<LoadedImage> {
        let cube = read_cube(self.cube_path(rec, modality)?)?;
        let rgb = if !with_rgb {
            None
        } else if modality == Modality::Rgb {
            Some(cube.clone())
        } else {
            Some(read_cube(self.cube_path(rec, Modality::Rgb)?)?)
        };
        let labels = read_labels(self.labels_path(rec))?;
        Ok(LoadedImage {
            subject: subject.id.clone(),
            image: rec.id.clone(),
            cube,
            rgb,
            labels,
        })
    }

    /// Restricts the index to the given subjects, preserving their order in `ids`.
    pub fn restrict(&self, ids: &[String]) -> Result<DatasetIndex> {
        let subjects = ids
            .iter()
            .map(|id| {
                self.subject(id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidData(format!("unknown subject {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetIndex::new(self.root.clone(), subjects)
    }
}

/// Per-class pixel totals over the images of the given subjects, IGNORE excluded.
pub fn class_pixel_counts(
    index: &DatasetIndex,
    split: &[String],
    n_classes: usize,
) -> Result<Vec<u64>> {
    if split.is_empty() {
        return Err(Error::Empty("class_pixel_counts needs a nonempty split".into()));
    }
    let mut counts = vec![0u64; n_classes];
    for id in split {
        let subject = index
            .subject(id)
            .ok_or_else(|| Error::InvalidData(format!("unknown subject {id}")))?;
        for rec in &subject.images {
            let labels = read_labels(index.labels_path(rec))?;
            accumulate_counts(&labels, &mut counts)?;
        }
    }
    Ok(counts)
}

pub(crate) fn accumulate_counts(labels: &LabelMap, counts: &mut [u64]) -> Result<()> {
    let n = counts.len();
    for &l in labels.labels() {
        if l == IGNORE {
            continue;
        }
        let slot = counts.get_mut(l as usize).ok_or_else(|| {
            Error::InvalidData(format!("label {l} out of range for {n} classes"))
        })?;
        *slot += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsicube::write_labels;

    fn single_image_index(dir: &Path, labels: &LabelMap) -> DatasetIndex {
        write_labels(labels, dir.join("a.labels")).unwrap();
        let rec = ImageRecord {
            id: "a".into(),
            labels: "a.labels".into(),
            cubes: BTreeMap::new(),
        };
        DatasetIndex::new(
            dir,
            vec![SubjectRecord {
                id: "P01".into(),
                images: vec![rec],
            }],
        )
        .unwrap()
    }

    #[test]
    fn counts_exclude_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 0, 1, IGNORE]).unwrap();
        let index = single_image_index(dir.path(), &labels);
        let counts = class_pixel_counts(&index, &["P01".into()], 2).unwrap();
        assert_eq!(counts, vec![2, 1]);
    }

    #[test]
    fn all_ignore_gives_zero_counts() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::filled(3, 3, IGNORE);
        let index = single_image_index(dir.path(), &labels);
        assert_eq!(
            class_pixel_counts(&index, &["P01".into()], 4).unwrap(),
            vec![0; 4]
        );
    }

    #[test]
    fn empty_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let index = single_image_index(dir.path(), &LabelMap::filled(1, 1, 0));
        assert!(matches!(
            class_pixel_counts(&index, &[], 2),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn duplicate_subjects_rejected() {
        let s = SubjectRecord {
            id: "P01".into(),
            images: vec![],
        };
        assert!(DatasetIndex::new("x", vec![s.clone(), s]).is_err());
    }
}
