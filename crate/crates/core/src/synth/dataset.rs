//! On-disk datasets: per-sample tensor files plus tab-separated manifests.
//!
//! `train.tsv` / `test.tsv` start with `# key=value` provenance lines, then
//! a header row and one row per sample:
//!
//! ```text
//! id  seed  night  requested  visible  thermal  mask  objects
//! ```
//!
//! `objects` is `class:x1,y1,x2,y2:visibility` joined by `;`, or `-`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{generate_scene_with_id, SampleMeta, SceneSpec, SpectralSample};
use crate::detector::{BBox, GroundTruth, GtObject};
use crate::error::{Error, Result};
use crate::tensor::io::{load_tensor, save_tensor};

const HEADER: &str = "id\tseed\tnight\trequested\tvisible\tthermal\tmask\tobjects";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample seed. The finaliser is a bijection, so distinct
/// `(split, index)` pairs under one dataset seed never collide.
pub fn sample_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(dataset_seed).wrapping_add(2 * index as u64 + split.tag()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub night: bool,
    pub requested_objects: usize,
    pub visible: PathBuf,
    pub thermal: PathBuf,
    pub mask: PathBuf,
    pub objects: Vec<GtObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub train: Vec<ManifestRow>,
    pub test: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn rows(&self, split: Split) -> &[ManifestRow] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Maps a sample id to image files of a real dataset. Only the interface is
/// provided; nothing in this crate implements it.
pub trait ExternalSource {
    fn resolve(&self, sample_id: &str) -> Option<ExternalPaths>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalPaths {
    pub visible: PathBuf,
    pub thermal: PathBuf,
    pub annotations: PathBuf,
}

fn format_objects(objects: &[GtObject]) -> String {
    if objects.is_empty() {
        return "-".into();
    }
    objects
        .iter()
        .map(|o| {
            let b = o.bbox;
            format!("{}:{},{},{},{}:{}", o.class_id, b.x1, b.y1, b.x2, b.y2, o.visibility)
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_objects(field: &str, path: &Path) -> Result<Vec<GtObject>> {
    if field == "-" {
        return Ok(Vec::new());
    }
    let bad = |what: &str| Error::format(path, format!("bad object {what:?}"));
    field
        .split(';')
        .map(|item| {
            let mut parts = item.split(':');
            let (Some(c), Some(b), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad(item));
            };
            let coords: Vec<f64> = b.split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(item))?;
            if coords.len() != 4 {
                return Err(bad(item));
            }
            Ok(GtObject {
                bbox: BBox::new(coords[0], coords[1], coords[2], coords[3]),
                class_id: c.parse().map_err(|_| bad(item))?,
                visibility: v.parse().map_err(|_| bad(item))?,
            })
        })
        .collect()
}

fn spec_lines(spec: &SceneSpec) -> Vec<String> {
    let classes: Vec<String> = spec
        .classes
        .iter()
        .map(|c| format!("{}[{},{}]{:?}", c.name, c.aspect.0, c.aspect.1, c.shape))
        .collect();
    vec![
        format!("spec.size={}x{}", spec.width, spec.height),
        format!("spec.objects={}..{}", spec.min_objects, spec.max_objects),
        format!("spec.object_height={}..{}", spec.min_object_height, spec.max_object_height),
        format!(
            "spec.visibility=both:{},visible_only:{},thermal_only:{}",
            spec.p_both, spec.p_visible_only, spec.p_thermal_only
        ),
        format!("spec.clutter={}", spec.clutter),
        format!("spec.noise_sigma={}", spec.noise_sigma),
        format!("spec.time_of_day={}", spec.time_of_day),
        format!("spec.night_contrast={}", super::NIGHT_CONTRAST),
        format!("spec.classes={}", classes.join(";")),
    ]
}

/// Render `n_train + n_test` scenes into `out_dir`. The directory itself is
/// created if needed, but not its parents. Manifests are written last, so a
/// failure never leaves a manifest behind.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must be positive".into()));
    }
    if !out_dir.is_dir() {
        fs::create_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let samples_dir = out_dir.join("samples");
    if !samples_dir.is_dir() {
        fs::create_dir(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    }
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed,
        train: Vec::new(),
        test: Vec::new(),
    };
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let id = format!("{}-{i:05}", split.name());
            let s = sample_seed(seed, split, i);
            let sample = generate_scene_with_id(spec, s, id.clone())?;
            let rel = |kind: &str| PathBuf::from("samples").join(format!("{id}.{kind}.cfrt"));
            let row = ManifestRow {
                visible: rel("vis"),
                thermal: rel("thm"),
                mask: rel("mask"),
                id,
                seed: s,
                night: sample.meta.night,
                requested_objects: sample.meta.requested_objects,
                objects: sample.gt.objects.clone(),
            };
            save_tensor(&out_dir.join(&row.visible), &sample.visible)?;
            save_tensor(&out_dir.join(&row.thermal), &sample.thermal)?;
            save_tensor(&out_dir.join(&row.mask), &sample.gt.mask)?;
            rows.push(row);
        }
        match split {
            Split::Train => manifest.train = rows,
            Split::Test => manifest.test = rows,
        }
    }
    for split in [Split::Train, Split::Test] {
        let path = out_dir.join(format!("{split}.tsv"));
        let tmp = out_dir.join(format!(".{split}.tsv.partial"));
        let mut text = String::new();
        text.push_str("# cfr synthetic manifest v1\n");
        text.push_str(&format!("# split={split}\n# dataset_seed={seed}\n"));
        for line in spec_lines(spec) {
            text.push_str(&format!("# {line}\n"));
        }
        text.push_str(HEADER);
        text.push('\n');
        for r in manifest.rows(split) {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.seed,
                u8::from(r.night),
                r.requested_objects,
                r.visible.display(),
                r.thermal.display(),
                r.mask.display(),
                format_objects(&r.objects)
            ));
        }
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(manifest)
}

fn parse_rows(path: &Path) -> Result<(u64, Vec<ManifestRow>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seed = None;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix("# ") {
            if let Some(v) = meta.strip_prefix("dataset_seed=") {
                seed = Some(v.parse().map_err(|_| Error::format(path, "bad dataset_seed"))?);
            }
            continue;
        }
        if line == HEADER {
            saw_header = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !saw_header || f.len() != 8 {
            return Err(Error::format(path, format!("unexpected row {line:?}")));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
        rows.push(ManifestRow {
            id: f[0].to_string(),
            seed: num(f[1])?,
            night: num(f[2])? != 0,
            requested_objects: num(f[3])? as usize,
            visible: PathBuf::from(f[4]),
            thermal: PathBuf::from(f[5]),
            mask: PathBuf::from(f[6]),
            objects: parse_objects(f[7], path)?,
        });
    }
    let seed = seed.ok_or_else(|| Error::format(path, "missing dataset_seed"))?;
    Ok((seed, rows))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let (seed, train) = parse_rows(&dir.join("train.tsv"))?;
    let (test_seed, test) = parse_rows(&dir.join("test.tsv"))?;
    if seed != test_seed {
        return Err(Error::format(dir, "train and test manifests disagree on the seed"));
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        seed,
        train,
        test,
    })
}

/// Load every sample of one split.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SpectralSample>> {
    let manifest = read_manifest(dir)?;
    manifest
        .rows(split)
        .iter()
        .map(|r| {
            let visible = load_tensor(&dir.join(&r.visible))?;
            let thermal = load_tensor(&dir.join(&r.thermal))?;
            let mask = load_tensor(&dir.join(&r.mask))?;
            let placed = r.objects.len();
            Ok(SpectralSample {
                visible,
                thermal,
                gt: GroundTruth {
                    objects: r.objects.clone(),
                    mask,
                },
                meta: SampleMeta {
                    id: r.id.clone(),
                    seed: r.seed,
                    night: r.night,
                    requested_objects: r.requested_objects,
                    placed_objects: placed,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn seeds_are_disjoint_across_splits() {
        let train: HashSet<u64> = (0..500).map(|i| sample_seed(9, Split::Train, i)).collect();
        let test: HashSet<u64> = (0..500).map(|i| sample_seed(9, Split::Test, i)).collect();
        assert_eq!(train.len(), 500);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn object_field_round_trips() {
        let objs = vec![
            GtObject {
                bbox: BBox::new(1.0, 2.5, 10.0, 30.25),
                class_id: 2,
                visibility: crate::detector::Visibility::ThermalOnly,
            },
            GtObject {
                bbox: BBox::new(0.1, 0.2, 0.30000000000000004, 9.0),
                class_id: 0,
                visibility: crate::detector::Visibility::Both,
            },
        ];
        let p = Path::new("x");
        assert_eq!(parse_objects(&format_objects(&objs), p).unwrap(), objs);
        assert!(parse_objects("", p).is_err());
        assert!(parse_objects("0:1,2,3:both", p).is_err());
        assert_eq!(parse_objects("-", p).unwrap(), vec![]);
    }
}
