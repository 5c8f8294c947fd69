//! Dataset directory format: `manifest.json` plus raw little-endian,
//! row-major binaries (`f32` images, `i16` labels, `u8` known-negative masks).

use super::{DatasetManifest, HardLabelMap, PartialLabelMap, SampleFiles, SampleRecord, UNKNOWN};
use crate::error::{Error, Result};
use crate::grid::Grid;
use std::path::{Path, PathBuf};

fn read_bytes(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_grid(path: &Path, height: usize, width: usize) -> Result<Grid<f32>> {
    let bytes = read_bytes(path, height * width * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Grid::from_vec(height, width, data))
}

pub fn read_i16_grid(path: &Path, height: usize, width: usize) -> Result<Grid<i16>> {
    let bytes = read_bytes(path, height * width * 2)?;
    let data = bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    Ok(Grid::from_vec(height, width, data))
}

fn read_mask(path: &Path, height: usize, width: usize) -> Result<Grid<bool>> {
    let bytes = read_bytes(path, height * width)?;
    let mut data = Vec::with_capacity(bytes.len());
    for b in bytes {
        match b {
            0 => data.push(false),
            1 => data.push(true),
            other => {
                return Err(Error::Validation(format!(
                    "{}: mask byte {other} not in {{0, 1}}",
                    path.display()
                )))
            }
        }
    }
    Ok(Grid::from_vec(height, width, data))
}

pub fn write_f32_grid(path: &Path, grid: &Grid<f32>) -> Result<()> {
    let bytes: Vec<u8> = grid.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn write_i16_grid(path: &Path, grid: &Grid<i16>) -> Result<()> {
    let bytes: Vec<u8> = grid.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub(crate) fn write_sample(
    root: &Path,
    files: &SampleFiles,
    image: &Grid<f32>,
    partial: Option<&PartialLabelMap>,
    full: Option<&HardLabelMap>,
) -> Result<()> {
    write_f32_grid(&root.join(&files.image), image)?;
    if let (Some(p), Some(name)) = (partial, &files.partial_label) {
        write_i16_grid(&root.join(name), &p.classes)?;
    }
    if let (Some(neg), Some(name)) = (partial.and_then(|p| p.known_negative.as_ref()), &files.known_negative) {
        let bytes: Vec<u8> = neg.data.iter().map(|&b| b as u8).collect();
        write_bytes(&root.join(name), &bytes)?;
    }
    if let (Some(f), Some(name)) = (full, &files.full_label) {
        write_i16_grid(&root.join(name), &f.classes.map(|&v| v as i16))?;
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_bytes(path, text.as_bytes())
}

/// Reads `manifest.json` (or the given file) and checks that every referenced
/// binary exists, has the declared shape and holds valid label values.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(Dataset::load(path)?.manifest)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

/// A manifest with all of its samples decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Pooled training records across all subsets, in manifest order.
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Dataset {
    /// Loads a dataset directory or an explicit manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: mpath.clone(),
            source,
        })?;
        manifest.check()?;
        let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();

        let mut jobs: Vec<(&SampleFiles, Option<(usize, u8)>)> = Vec::new();
        for s in &manifest.subsets {
            for f in &s.samples {
                jobs.push((f, Some((s.subset_id, s.labeled_class))));
            }
        }
        for f in &manifest.test {
            jobs.push((f, None));
        }

        let workers = std::env::var("LTUDA_NUM_WORKERS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(1)
            .clamp(1, 64);
        let records = load_parallel(&root, &manifest, &jobs, workers)?;
        let n_train = manifest.num_train();
        let mut records = records.into_iter();
        let train = records.by_ref().take(n_train).collect();
        let test = records.collect();
        Ok(Self {
            root,
            manifest,
            train,
            test,
        })
    }

    pub fn num_classes(&self) -> u8 {
        self.manifest.num_classes
    }
}

fn load_parallel(
    root: &Path,
    manifest: &DatasetManifest,
    jobs: &[(&SampleFiles, Option<(usize, u8)>)],
    workers: usize,
) -> Result<Vec<SampleRecord>> {
    if workers <= 1 || jobs.len() < 2 {
        return jobs.iter().map(|(f, s)| load_record(root, manifest, f, *s)).collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<SampleRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(f, s)| load_record(root, manifest, f, *s))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(jobs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn check_label_range(path: &Path, grid: &Grid<i16>, num_classes: u8) -> Result<()> {
    if let Some(v) = grid.data.iter().find(|&&v| v < UNKNOWN || v > num_classes as i16) {
        return Err(Error::Validation(format!(
            "{}: label value {v} outside {{-1, 0..={num_classes}}}",
            path.display()
        )));
    }
    Ok(())
}

fn load_record(
    root: &Path,
    manifest: &DatasetManifest,
    files: &SampleFiles,
    subset: Option<(usize, u8)>,
) -> Result<SampleRecord> {
    let (h, w) = manifest.image_size;
    let c = manifest.num_classes;
    let image = read_f32_grid(&root.join(&files.image), h, w)?;

    let full_label = match &files.full_label {
        Some(name) => {
            let path = root.join(name);
            let g = read_i16_grid(&path, h, w)?;
            check_label_range(&path, &g, c)?;
            if g.data.contains(&UNKNOWN) {
                return Err(Error::Validation(format!("{}: full label contains -1", path.display())));
            }
            Some(HardLabelMap::new(g.map(|&v| v as u8)))
        }
        None => None,
    };

    let partial_label = match subset {
        Some((_, labeled_class)) => {
            let name = files.partial_label.as_ref().expect("checked by manifest");
            let path = root.join(name);
            let classes = read_i16_grid(&path, h, w)?;
            check_label_range(&path, &classes, c)?;
            let known_negative = match &files.known_negative {
                Some(n) => Some(read_mask(&root.join(n), h, w)?),
                None => None,
            };
            PartialLabelMap::new(classes, labeled_class, known_negative)
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
        }
        None => PartialLabelMap::unknown(h, w, 0),
    };

    let record = SampleRecord {
        image,
        partial_label,
        subset_id: subset.map_or(usize::MAX, |s| s.0),
        full_label,
    };
    record
        .validate(c)
        .map_err(|e| Error::Validation(format!("{}: {e}", root.join(&files.image).display())))?;
    Ok(record)
}
