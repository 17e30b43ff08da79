use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{read_pnm, Image};
use super::SampleTile;
use crate::error::{Error, Result};
use crate::models::derive_image_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads every pair into memory.
    pub fn load_samples(&self) -> Result<Vec<SampleTile>> {
        self.entries.iter().map(load_pair).collect()
    }
}

/// Reads one image/mask pair, mapping mask values {0, 255} to {0, 1}.
pub fn load_pair(entry: &ManifestEntry) -> Result<SampleTile> {
    let image = read_pnm(&entry.image_path)?;
    if image.channels != 3 {
        return Err(Error::Format(format!(
            "{}: expected an RGB (P6) image",
            entry.image_path.display()
        )));
    }
    let raw = read_pnm(&entry.mask_path)?;
    if raw.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected a grayscale (P5) mask",
            entry.mask_path.display()
        )));
    }
    if raw.dims() != image.dims() {
        return Err(Error::shape(
            "load_dataset",
            format!(
                "{}: mask {:?} vs image {:?}",
                entry.stem,
                raw.dims(),
                image.dims()
            ),
        ));
    }
    let mut mask = raw;
    for v in &mut mask.data {
        *v = match *v {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::Mask {
                    path: entry.mask_path.clone(),
                    value: other,
                })
            }
        };
    }
    Ok(SampleTile::new(image, mask, entry.stem.clone(), (0, 0)))
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Scans `root/images/*.ppm` and `root/masks/*.pgm`, sorted by stem, and
/// validates every pair.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Manifest(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let masks_dir = root.join("masks");
    let mut entries = Vec::new();
    for (stem, image_path) in stems(&root.join("images"), "ppm")? {
        let mask_path = masks_dir.join(format!("{stem}.pgm"));
        if !mask_path.is_file() {
            return Err(Error::Manifest(format!("no mask for image {stem}")));
        }
        let entry = ManifestEntry {
            stem,
            image_path,
            mask_path,
            split: Split::Unassigned,
        };
        load_pair(&entry)?;
        entries.push(entry);
    }
    Ok(DatasetManifest { entries })
}

/// Seeded shuffle, then the first round(n · fraction) entries form the test
/// split. Both halves keep lexicographic order.
pub fn split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let n = manifest.len();
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} items")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (DatasetManifest::default(), DatasetManifest::default());
    for (entry, t) in manifest.entries.iter().zip(is_test) {
        let mut e = entry.clone();
        if t {
            e.split = Split::Test;
            test.entries.push(e);
        } else {
            e.split = Split::Train;
            train.entries.push(e);
        }
    }
    Ok((train, test))
}

/// Writes an RGB image and {0,1} mask in the dataset layout under `root`.
pub fn write_pair(root: &Path, stem: &str, image: &Image, mask: &Image) -> Result<()> {
    use super::image::write_pnm;
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_pnm(image, &root.join("images").join(format!("{stem}.ppm")))?;
    let scaled = Image {
        data: mask
            .data
            .iter()
            .map(|&v| if v != 0 { 255 } else { 0 })
            .collect(),
        ..mask.clone()
    };
    write_pnm(&scaled, &root.join("masks").join(format!("{stem}.pgm")))
}

/// Image-level label of a {0,1} mask.
pub fn mask_label(mask: &Image) -> usize {
    derive_image_label(&mask.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::write_pnm;

    fn entries(n: usize) -> DatasetManifest {
        DatasetManifest {
            entries: (0..n)
                .map(|i| ManifestEntry {
                    stem: format!("s{i:04}"),
                    image_path: PathBuf::new(),
                    mask_path: PathBuf::new(),
                    split: Split::Unassigned,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_directory_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn sorted_valid_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 3, 3, 9);
        let mut mask = Image::filled(4, 3, 1, 0);
        mask.data[5] = 1;
        for stem in ["c", "a", "b"] {
            write_pair(dir.path(), stem, &img, &mask).unwrap();
        }
        let m = load_dataset(dir.path()).unwrap();
        let stems: Vec<&str> = m.entries.iter().map(|e| e.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b", "c"]);
        let samples = m.load_samples().unwrap();
        assert_eq!(samples[0].mask, mask);
        assert_eq!(samples[0].label, 1);
    }

    #[test]
    fn invalid_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 3, 3, 9);
        write_pair(dir.path(), "a", &img, &Image::filled(4, 3, 1, 0)).unwrap();
        write_pnm(&Image::filled(4, 3, 1, 17), &dir.path().join("masks/a.pgm")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Mask { value: 17, .. })
        ));

        write_pnm(&Image::filled(5, 3, 1, 0), &dir.path().join("masks/a.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Shape { .. })));

        std::fs::remove_file(dir.path().join("masks/a.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn split_counts() {
        let (train, test) = split(&entries(938), 119.0 / 938.0, 3).unwrap();
        assert_eq!((train.len(), test.len()), (819, 119));
        let (train, test) = split(&entries(4), 0.5, 3).unwrap();
        assert_eq!((train.len(), test.len()), (2, 2));
        assert!(train.entries.iter().all(|e| e.split == Split::Train));
        assert!(matches!(split(&entries(1), 0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_seeded_and_exhaustive() {
        let m = entries(50);
        let a = split(&m, 0.3, 11).unwrap();
        assert_eq!(a, split(&m, 0.3, 11).unwrap());
        assert_ne!(a.1, split(&m, 0.3, 12).unwrap().1);
        let mut all: Vec<String> =
            a.0.entries
                .iter()
                .chain(&a.1.entries)
                .map(|e| e.stem.clone())
                .collect();
        all.sort();
        assert_eq!(
            all,
            m.entries.iter().map(|e| e.stem.clone()).collect::<Vec<_>>()
        );
    }
}
