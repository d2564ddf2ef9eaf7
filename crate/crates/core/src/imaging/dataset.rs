use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_relative_ev, load_image, save_image};
use crate::error::{invalid, Error, Result};

/// The relative exposure offsets rendered for every source image.
pub const DEFAULT_EVS: [f64; 5] = [-1.5, -1.0, 0.0, 1.0, 1.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[serde(alias = "TRAIN")]
    Train,
    #[serde(alias = "VAL")]
    Val,
    #[serde(alias = "TEST")]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input_path: PathBuf,
    pub target_path: PathBuf,
    pub relative_ev: f64,
    pub split: Split,
}

/// Input/target pairs on disk. Relative paths are resolved against the
/// directory containing the manifest file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses the manifest and checks that every referenced file exists and
    /// that each input/target pair has matching dimensions.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.entries {
            for p in [&mut entry.input_path, &mut entry.target_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            let di = image::image_dimensions(&entry.input_path).map_err(|e| Error::Image {
                path: entry.input_path.clone(),
                message: e.to_string(),
            })?;
            let dt = image::image_dimensions(&entry.target_path).map_err(|e| Error::Image {
                path: entry.target_path.clone(),
                message: e.to_string(),
            })?;
            if di != dt {
                return Err(Error::Image {
                    path: entry.input_path.clone(),
                    message: format!("input is {}x{} but target is {}x{}", di.0, di.1, dt.0, dt.1),
                });
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// File name used for a rendered exposure variant, e.g. `beach_ev-1.5.png`.
pub fn ev_file_name(stem: &str, ev: f64) -> String {
    format!("{stem}_ev{ev:+.1}.png")
}

/// Renders every source image in `src_dir` at each relative EV, writing the
/// degraded inputs to `out_dir`. The untouched source is the target.
pub fn synthesize_dataset(
    src_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    evs: &[f64],
    split: Split,
) -> Result<DatasetManifest> {
    let (src_dir, out_dir) = (src_dir.as_ref(), out_dir.as_ref());
    if evs.is_empty() {
        return Err(invalid("no exposure values requested"));
    }
    let mut sources: Vec<PathBuf> = std::fs::read_dir(src_dir)
        .map_err(|e| Error::io(src_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(Error::Config(format!(
            "no PNG/PPM source images in {}",
            src_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::default();
    for src in &sources {
        let img = load_image(src)?;
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for &ev in evs {
            let rendered = apply_relative_ev(&img, ev)?;
            let out = out_dir.join(ev_file_name(stem, ev));
            save_image(&rendered, &out)?;
            manifest.entries.push(ManifestEntry {
                input_path: out,
                target_path: src.clone(),
                relative_ev: ev,
                split,
            });
        }
    }
    Ok(manifest)
}
