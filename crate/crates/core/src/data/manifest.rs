//! Dataset manifests: one JSON object per line describing an image, its label
//! and optional flood mask. Paths inside a manifest file are stored relative to
//! the directory holding the manifest.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "RWFI")]
    Rwfi,
    #[serde(rename = "WSOC")]
    Wsoc,
    #[serde(rename = "StreetG")]
    StreetG,
    #[serde(rename = "WebG132")]
    WebG132,
    #[serde(rename = "WebG504")]
    WebG504,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Rwfi => "RWFI",
            Source::Wsoc => "WSOC",
            Source::StreetG => "StreetG",
            Source::WebG132 => "WebG132",
            Source::WebG504 => "WebG504",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Source::Rwfi,
            Source::Wsoc,
            Source::StreetG,
            Source::WebG132,
            Source::WebG504,
            Source::Synthetic,
        ];
        all.into_iter()
            .find(|src| src.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown source `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    /// 1 = GAN-manipulated, 0 = real.
    pub label: u8,
    pub mask_path: Option<PathBuf>,
    pub source: Source,
    pub split: Split,
}

impl SampleRecord {
    pub fn stem(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Files that were found but could not be turned into records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub skipped: Vec<(PathBuf, String)>,
}

#[derive(Clone, Debug)]
pub struct ManifestBuild {
    pub records: Vec<SampleRecord>,
    pub skipped: SkipReport,
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let hidden = path
            .file_name()
            .map(|n| n.to_string_lossy().starts_with('.'))
            .unwrap_or(true);
        if entry.file_type()?.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn decoded_dimensions(path: &Path) -> std::result::Result<(u32, u32), String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?;
    Ok((img.width(), img.height()))
}

/// Scans `image_dir` and emits one record per decodable image, sorted by file
/// name. When `mask_dir` is given, masks are paired by file stem.
pub fn build_manifest(
    image_dir: &Path,
    label: u8,
    mask_dir: Option<&Path>,
    source: Source,
) -> Result<ManifestBuild> {
    if label > 1 {
        return Err(Error::InvalidConfig(format!("label must be 0 or 1, got {label}")));
    }
    if !image_dir.is_dir() {
        return Err(Error::InvalidConfig(format!(
            "image directory {} does not exist",
            image_dir.display()
        )));
    }
    let masks: HashMap<String, PathBuf> = match mask_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::InvalidConfig(format!(
                    "mask directory {} does not exist",
                    dir.display()
                )));
            }
            let mut map = HashMap::new();
            for path in sorted_files(dir)? {
                // first file per stem wins; sorted order keeps this stable
                map.entry(stem_of(&path)).or_insert(path);
            }
            map
        }
        None => HashMap::new(),
    };

    let mut records = Vec::new();
    let mut skipped = SkipReport::default();
    for path in sorted_files(image_dir)? {
        let dims = match decoded_dimensions(&path) {
            Ok(d) => d,
            Err(reason) => {
                skipped.skipped.push((path, reason));
                continue;
            }
        };
        let mask_path = match masks.get(&stem_of(&path)) {
            Some(mask) => match decoded_dimensions(mask) {
                Ok(md) if md == dims => Some(mask.clone()),
                Ok(md) => {
                    skipped.skipped.push((
                        path,
                        format!("mask {} is {}x{}, image is {}x{}", mask.display(), md.0, md.1, dims.0, dims.1),
                    ));
                    continue;
                }
                Err(reason) => {
                    skipped.skipped.push((path, format!("mask {}: {reason}", mask.display())));
                    continue;
                }
            },
            None => None,
        };
        records.push(SampleRecord {
            image_path: path,
            label,
            mask_path,
            source,
            split: Split::Test,
        });
    }
    if records.is_empty() {
        return Err(Error::ManifestEmpty(image_dir.to_path_buf()));
    }
    Ok(ManifestBuild { records, skipped })
}

fn normalize_lexically(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn absolute(path: &Path) -> Result<PathBuf> {
    if path.is_absolute() {
        Ok(normalize_lexically(path))
    } else {
        Ok(normalize_lexically(&std::env::current_dir()?.join(path)))
    }
}

/// Expresses `path` relative to `base`; both are made absolute first.
pub fn relative_to(path: &Path, base: &Path) -> Result<PathBuf> {
    let path = absolute(path)?;
    let base = absolute(base)?;
    let p: Vec<_> = path.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for comp in &p[common..] {
        rel.push(comp.as_os_str());
    }
    Ok(rel)
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes a JSON-lines manifest with paths relative to the manifest's directory.
pub fn write_manifest(records: &[SampleRecord], manifest: &Path) -> Result<()> {
    let base = manifest_dir(manifest);
    let mut out = Vec::new();
    for rec in records {
        let mut rel = rec.clone();
        rel.image_path = relative_to(&rec.image_path, &base)?;
        rel.mask_path = rec.mask_path.as_deref().map(|m| relative_to(m, &base)).transpose()?;
        serde_json::to_writer(&mut out, &rel)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(manifest)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a JSON-lines manifest, resolving relative paths against its directory.
pub fn read_manifest(manifest: &Path) -> Result<Vec<SampleRecord>> {
    let base = manifest_dir(manifest);
    let reader = BufReader::new(fs::File::open(manifest)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidConfig(format!("{}:{}: {e}", manifest.display(), lineno + 1))
        })?;
        if rec.label > 1 {
            return Err(Error::InvalidConfig(format!(
                "{}:{}: label must be 0 or 1",
                manifest.display(),
                lineno + 1
            )));
        }
        if rec.image_path.is_relative() {
            rec.image_path = base.join(&rec.image_path);
        }
        if let Some(m) = rec.mask_path.take() {
            rec.mask_path = Some(if m.is_relative() { base.join(m) } else { m });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Resolves a manifest location given on the command line or in a config,
/// using `FLOODFORENSICS_DATA_ROOT` as the base for relative paths when set.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("FLOODFORENSICS_DATA_ROOT") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn write_rgb(path: &Path, w: u32, h: u32) {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 3) as u8, 40]))
            .save(path)
            .unwrap();
    }

    fn write_mask(path: &Path, w: u32, h: u32) {
        GrayImage::from_fn(w, h, |x, _| image::Luma([if x < w / 2 { 255 } else { 0 }]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_manifest(dir.path(), 1, None, Source::StreetG).unwrap_err();
        assert!(matches!(err, Error::ManifestEmpty(_)));
    }

    #[test]
    fn pairs_masks_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("img");
        let masks = dir.path().join("mask");
        fs::create_dir_all(&imgs).unwrap();
        fs::create_dir_all(&masks).unwrap();
        for name in ["c", "a", "b"] {
            write_rgb(&imgs.join(format!("{name}.png")), 12, 8);
        }
        write_mask(&masks.join("a.png"), 12, 8);
        write_mask(&masks.join("c.png"), 12, 8);

        let built = build_manifest(&imgs, 1, Some(&masks), Source::StreetG).unwrap();
        let stems: Vec<_> = built.records.iter().map(SampleRecord::stem).collect();
        assert_eq!(stems, ["a", "b", "c"]);
        let with_mask = built.records.iter().filter(|r| r.mask_path.is_some()).count();
        assert_eq!(with_mask, 2);
        assert!(built.records[1].mask_path.is_none());
        assert!(built.skipped.skipped.is_empty());
    }

    #[test]
    fn undecodable_files_are_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_rgb(&dir.path().join("good.png"), 4, 4);
        fs::write(dir.path().join("broken.jpg"), b"not a jpeg").unwrap();
        let built = build_manifest(dir.path(), 0, None, Source::Wsoc).unwrap();
        assert_eq!(built.records.len(), 1);
        assert_eq!(built.skipped.skipped.len(), 1);
        assert!(built.skipped.skipped[0].0.ends_with("broken.jpg"));
    }

    #[test]
    fn manifest_file_round_trip_uses_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("data/img");
        let masks = dir.path().join("data/mask");
        fs::create_dir_all(&imgs).unwrap();
        fs::create_dir_all(&masks).unwrap();
        write_rgb(&imgs.join("x.png"), 6, 6);
        write_mask(&masks.join("x.png"), 6, 6);
        let built = build_manifest(&imgs, 0, Some(&masks), Source::Rwfi).unwrap();

        let out = dir.path().join("manifests/rwfi.jsonl");
        fs::create_dir_all(out.parent().unwrap()).unwrap();
        write_manifest(&built.records, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.contains("\"image_path\":\"../data/img/x.png\""), "{text}");
        assert!(text.contains("\"source\":\"RWFI\""));

        let back = read_manifest(&out).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(
            absolute(&back[0].image_path).unwrap(),
            absolute(&built.records[0].image_path).unwrap()
        );
        assert!(back[0].mask_path.is_some());
    }

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a")).unwrap(), PathBuf::from("b/c.png"));
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a/d")).unwrap(), PathBuf::from("../b/c.png"));
    }

    #[test]
    fn source_parses_case_insensitively() {
        assert_eq!("streetg".parse::<Source>().unwrap(), Source::StreetG);
        assert!("mapillary".parse::<Source>().is_err());
    }
}
