//! Scene manifests: `manifest.csv` with one `id,left_path,right_path,disparity_path`
//! line per scene (paths relative to the manifest, `right_path` may be empty),
//! plus an optional `corpus.txt` of `key=value` lines.
//!
//! Recognised `corpus.txt` keys: `shift_px` (pixel disparity of normalized
//! disparity 1; when absent, maps are smoothed and min-max normalized) and
//! `condition.<id>` (condition token of a scene).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::image::{cover_size, fit_to_working, read_image, write_image};
use super::pfm::{parse_pfm, write_pfm, PfmImage};
use super::png::parse_kitti_disparity;
use super::synthetic::{SceneMeta, SceneRecord};
use crate::disparity::{normalize, smooth, DisparityField};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "id,left_path,right_path,disparity_path";
/// Gaussian smoothing radius applied to external ground-truth maps.
pub const GT_SMOOTH_RADIUS: i64 = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub left: PathBuf,
    pub right: Option<PathBuf>,
    pub disparity: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusInfo {
    pub shift_px: Option<f64>,
    pub conditions: BTreeMap<String, usize>,
}

impl CorpusInfo {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(v) = self.shift_px {
            s.push_str(&format!("shift_px={v}\n"));
        }
        for (id, tok) in &self.conditions {
            s.push_str(&format!("condition.{id}={tok}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut info = Self::default();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("corpus.txt", format!("expected key=value, got '{line}'"))
            })?;
            let bad = || Error::format("corpus.txt", format!("bad value in '{line}'"));
            if k == "shift_px" {
                info.shift_px = Some(v.parse().map_err(|_| bad())?);
            } else if let Some(id) = k.strip_prefix("condition.") {
                info.conditions
                    .insert(id.to_string(), v.parse().map_err(|_| bad())?);
            } else {
                log::debug!("ignoring corpus key '{k}'");
            }
        }
        Ok(info)
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == MANIFEST_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 || f[0].is_empty() || f[1].is_empty() || f[3].is_empty() {
            return Err(Error::format(
                "manifest",
                format!("line {}: expected 4 fields", n + 1),
            ));
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            left: base.join(f[1]),
            right: (!f[2].is_empty()).then(|| base.join(f[2])),
            disparity: base.join(f[3]),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&std::fs::read_to_string(path)?, base)
}

/// Pixel disparity from `.pfm` or KITTI `.png`.
pub fn read_disparity(path: impl AsRef<Path>) -> Result<DisparityField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pfm") => parse_pfm(&bytes)?.to_disparity(),
        Some("png") => parse_kitti_disparity(&bytes),
        _ => Err(Error::invalid(format!(
            "unsupported disparity file {}",
            path.display()
        ))),
    }
}

/// Loads one scene, fitted to `working` `(height, width)` when given, with
/// disparity normalized to `[0, 1]`.
pub fn load_scene(
    entry: &ManifestEntry,
    info: &CorpusInfo,
    working: Option<(usize, usize)>,
) -> Result<SceneRecord> {
    let left = read_image(&entry.left)?;
    let right = entry.right.as_ref().map(read_image).transpose()?;
    let disparity = read_disparity(&entry.disparity)?;
    let original_size = (left.height(), left.width());
    let (left, right, disparity, ratio) = match working {
        Some((h, w)) if (h, w) != original_size => {
            let (l, d) = fit_to_working(&left, Some(&disparity), h, w)?;
            let r = right
                .map(|r| fit_to_working(&r, None, h, w).map(|x| x.0))
                .transpose()?;
            let (_, sw) = cover_size(original_size, (h, w));
            (
                l,
                r,
                d.expect("disparity given"),
                sw as f64 / original_size.1 as f64,
            )
        }
        _ => (left, right, disparity, 1.0),
    };
    let (normalized, shift_px) = match info.shift_px {
        Some(s) if s > 0.0 => {
            let s = s * ratio;
            (clamp_unit(&disparity.scaled(1.0 / s)), s)
        }
        _ => {
            let smoothed = smooth(&disparity, GT_SMOOTH_RADIUS)?;
            let span = smoothed.valid_range().map_or(0.0, |(lo, hi)| hi - lo);
            (normalize(&smoothed)?, span)
        }
    };
    let record = SceneRecord {
        id: entry.id.clone(),
        left,
        right,
        disparity: normalized,
        condition: info.conditions.get(&entry.id).copied().unwrap_or(0),
        meta: SceneMeta {
            source: entry.left.display().to_string(),
            original_size,
            shift_px,
        },
    };
    record.validate()?;
    Ok(record)
}

fn clamp_unit(field: &DisparityField) -> DisparityField {
    let values = field.values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    DisparityField::with_validity(
        field.height(),
        field.width(),
        values,
        field.validity().to_vec(),
        field.resolution(),
    )
    .expect("same shape")
}

/// Loads every scene of a manifest. Scenes that fail to load are skipped
/// with a warning; the count of skipped scenes is returned alongside.
pub fn load_corpus(
    manifest: impl AsRef<Path>,
    working: Option<(usize, usize)>,
) -> Result<(Vec<SceneRecord>, usize)> {
    let manifest = manifest.as_ref();
    let entries = read_manifest(manifest)?;
    let info_path = manifest.with_file_name("corpus.txt");
    let info = if info_path.exists() {
        CorpusInfo::from_text(&std::fs::read_to_string(info_path)?)?
    } else {
        CorpusInfo::default()
    };
    let mut scenes = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for e in &entries {
        match load_scene(e, &info, working) {
            Ok(s) => scenes.push(s),
            Err(err) => {
                log::warn!("skipping scene '{}': {err}", e.id);
                skipped += 1;
            }
        }
    }
    Ok((scenes, skipped))
}

/// Writes PNG views, PFM pixel disparities (invalid as `inf`), `manifest.csv`
/// and `corpus.txt` into `dir`. Returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, scenes: &[SceneRecord]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let shift = scenes.first().map(|s| s.meta.shift_px);
    if scenes.iter().any(|s| Some(s.meta.shift_px) != shift) {
        return Err(Error::invalid("all scenes of a corpus must share shift_px"));
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut info = CorpusInfo {
        shift_px: shift,
        ..CorpusInfo::default()
    };
    for s in scenes {
        s.validate()?;
        if s.id.contains(',') || s.id.contains('=') {
            return Err(Error::invalid(format!(
                "scene id '{}' contains a separator",
                s.id
            )));
        }
        let left = format!("{}_left.png", s.id);
        let right = s.right.as_ref().map(|_| format!("{}_right.png", s.id));
        let disp = format!("{}_disp.pfm", s.id);
        write_image(&s.left, dir.join(&left))?;
        if let (Some(r), Some(name)) = (&s.right, &right) {
            write_image(r, dir.join(name))?;
        }
        let px = s.disparity.scaled(s.meta.shift_px);
        std::fs::write(dir.join(&disp), write_pfm(&PfmImage::from_disparity(&px))?)?;
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            s.id,
            left,
            right.unwrap_or_default(),
            disp
        ));
        info.conditions.insert(s.id.clone(), s.condition);
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest)?;
    std::fs::write(dir.join("corpus.txt"), info.to_text())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let text = format!("{MANIFEST_HEADER}\na,l.png,,d.pfm\nb,l2.png,r2.png,d2.png\n");
        let e = parse_manifest(&text, Path::new("/x")).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].right, None);
        assert_eq!(e[1].right, Some(PathBuf::from("/x/r2.png")));
        assert!(parse_manifest("a,b\n", Path::new(".")).is_err());
    }

    #[test]
    fn corpus_info_roundtrip() {
        let mut info = CorpusInfo {
            shift_px: Some(6.0),
            ..Default::default()
        };
        info.conditions.insert("s1".into(), 3);
        assert_eq!(CorpusInfo::from_text(&info.to_text()).unwrap(), info);
        assert!(CorpusInfo::from_text("shift_px=abc").is_err());
    }
}
