//! Dataset access: a directory of HR PNG images, optionally filtered by a
//! manifest file listing one relative path per line.

use crate::error::{Error, Result};
use crate::image::Image;
use std::path::Path;

pub struct Dataset {
    pub images: Vec<Image>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn from_images(images: Vec<Image>) -> Self {
        let names = (0..images.len()).map(|i| format!("image_{i}")).collect();
        Self { images, names }
    }

    /// Loads every `.png` in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Param(format!("no PNG images in {}", dir.display())));
        }
        let mut images = Vec::new();
        let mut names = Vec::new();
        for p in paths {
            images.push(Image::load_png(&p)?);
            names.push(
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        Ok(Self { images, names })
    }

    /// Loads the images named by the manifest: one path per line, relative
    /// to `dir`; blank lines and `#` comments are skipped.
    pub fn load_manifest(dir: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(manifest.as_ref())?;
        let mut images = Vec::new();
        let mut names = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let path = dir.join(line);
            images.push(Image::load_png(&path)?);
            names.push(line.trim_end_matches(".png").replace('/', "_"));
        }
        if images.is_empty() {
            return Err(Error::Param("manifest lists no images".into()));
        }
        Ok(Self { images, names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    fn write_png(dir: &Path, name: &str, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Image::from_tensor(Tensor::new(&[3, 8, 8], data).unwrap())
            .unwrap()
            .save_png(dir.join(name))
            .unwrap();
    }

    #[test]
    fn loads_directory_sorted() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "b.png", 1);
        write_png(dir.path(), "a.png", 2);
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.names, vec!["a", "b"]);
    }

    #[test]
    fn manifest_selects_subset() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 1);
        write_png(dir.path(), "b.png", 2);
        write_png(dir.path(), "c.png", 3);
        let mpath = dir.path().join("train.txt");
        std::fs::write(&mpath, "# split\nc.png\na.png\n").unwrap();
        let ds = Dataset::load_manifest(dir.path(), &mpath).unwrap();
        assert_eq!(ds.names, vec!["c", "a"]);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::load_dir(dir.path()).is_err());
        let mpath = dir.path().join("empty.txt");
        std::fs::write(&mpath, "# nothing\n").unwrap();
        assert!(Dataset::load_manifest(dir.path(), &mpath).is_err());
    }
}
