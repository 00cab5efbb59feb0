//! Directory corpora: indexing, label and pair tables, batched loading, and
//! the on-disk writer for synthetic corpora.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use latentface_core::probe::Pair;
use latentface_core::render::{Light, Map, Pose};
use latentface_core::synth::{self, FrameLabel, Split, SynthConfig};
use latentface_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;

pub const LABELS_FILE: &str = "labels.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATOR_VERSION: &str = "1";

/// One row of `labels.csv`. Angles are radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub split: SplitTag,
    pub identity: usize,
    pub frame: usize,
    pub class: usize,
    pub magnitude: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub ka: f64,
    pub kd: f64,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
}

impl From<Split> for SplitTag {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitTag::Train,
            Split::Eval => SplitTag::Eval,
        }
    }
}

impl From<SplitTag> for Split {
    fn from(s: SplitTag) -> Self {
        match s {
            SplitTag::Train => Split::Train,
            SplitTag::Eval => Split::Eval,
        }
    }
}

impl From<&FrameLabel> for LabelRow {
    fn from(l: &FrameLabel) -> Self {
        let [yaw, pitch, roll, tx, ty, tz] = l.pose.to_array();
        let [ka, kd, lx, ly] = l.light.to_array();
        Self { split: l.split.into(), identity: l.identity, frame: l.frame, class: l.class, magnitude: l.magnitude, yaw, pitch, roll, tx, ty, tz, ka, kd, lx, ly }
    }
}

impl LabelRow {
    pub fn pose(&self) -> Pose<f64> {
        Pose::from_array([self.yaw, self.pitch, self.roll, self.tx, self.ty, self.tz])
    }

    pub fn light(&self) -> Light<f64> {
        Light::from_array([self.ka, self.kd, self.lx, self.ly])
    }
}

/// One row of `pairs.csv`; paths are relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRow {
    pub img_a: String,
    pub img_b: String,
    pub same: u8,
}

/// An indexed image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// Relative path with `/` separators.
    pub path: String,
    pub split: Option<Split>,
    pub identity: Option<String>,
    pub frame: Option<String>,
}

impl Entry {
    fn parse(path: String) -> Self {
        let parts: Vec<&str> = path.split('/').collect();
        let stem = |s: &str| s.rsplit_once('.').map_or(s, |(a, _)| a).to_string();
        let (split, identity, frame) = match parts.as_slice() {
            [s, id, f] if Split::parse(s).is_some() => (Split::parse(s), Some(id.to_string()), Some(stem(f))),
            [id, f] => (None, Some(id.to_string()), Some(stem(f))),
            _ => (None, None, None),
        };
        Self { path, split, identity, frame }
    }

    /// `(split, identity, frame)` with numeric identity and frame, when parseable.
    fn key(&self) -> Option<(Split, usize, usize)> {
        Some((self.split?, self.identity.as_ref()?.parse().ok()?, self.frame.as_ref()?.parse().ok()?))
    }
}

/// A PNG directory tree with optional label and pair tables.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    /// Sorted by path bytes.
    pub entries: Vec<Entry>,
    pub labels: Option<Vec<LabelRow>>,
    pub pairs: Option<Vec<PairRow>>,
    by_key: HashMap<(Split, usize, usize), usize>,
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let path = entry.path();
        let kind = entry.file_type().map_err(Error::io(&path))?;
        if kind.is_dir() {
            walk(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let rel = path.strip_prefix(root).expect("walk stays under the root");
            let parts: Option<Vec<&str>> = rel.components().map(|c| c.as_os_str().to_str()).collect();
            let parts = parts.ok_or_else(|| Error::data(format!("{}: path is not UTF-8", path.display())))?;
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(Error::io(path))
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::data(format!("{}: not a directory", root.display())));
        }
        let mut paths = Vec::new();
        walk(&root, &root, &mut paths)?;
        if paths.is_empty() {
            return Err(Error::data(format!("{}: no PNG images found", root.display())));
        }
        paths.sort_unstable_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
        let entries: Vec<Entry> = paths.into_iter().map(Entry::parse).collect();
        let by_key = entries.iter().enumerate().filter_map(|(i, e)| Some((e.key()?, i))).collect();
        let table = |name: &str| Some(root.join(name)).filter(|p| p.is_file());
        let labels = table(LABELS_FILE).map(|p| read_csv::<LabelRow>(&p)).transpose()?;
        let pairs = table(PAIRS_FILE).map(|p| read_csv::<PairRow>(&p)).transpose()?;
        Ok(Self { root, entries, labels, pairs, by_key })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices of entries in `split`, or all entries for `None`.
    pub fn select(&self, split: Option<Split>) -> Vec<usize> {
        (0..self.len()).filter(|&i| split.is_none() || self.entries[i].split == split).collect()
    }

    pub fn find(&self, rel: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.path.as_bytes().cmp(rel.as_bytes())).ok()
    }

    /// The label of each entry in `indices`; an error names the first
    /// unlabelled entry.
    pub fn labels_for(&self, indices: &[usize]) -> Result<Vec<LabelRow>> {
        let rows = self.labels.as_ref().ok_or_else(|| Error::data(format!("{}: missing {LABELS_FILE}", self.root.display())))?;
        let mut table = HashMap::new();
        for r in rows {
            table.insert((Split::from(r.split), r.identity, r.frame), *r);
        }
        indices
            .iter()
            .map(|&i| {
                let e = &self.entries[i];
                e.key().and_then(|k| table.get(&k).copied()).ok_or_else(|| Error::data(format!("no label for {}", e.path)))
            })
            .collect()
    }

    /// Entry index of a labelled frame.
    pub fn index_of(&self, split: Split, identity: usize, frame: usize) -> Option<usize> {
        self.by_key.get(&(split, identity, frame)).copied()
    }

    /// Pairs resolved to entry indices.
    pub fn resolved_pairs(&self) -> Result<Vec<Pair>> {
        let rows = self.pairs.as_ref().ok_or_else(|| Error::data(format!("{}: missing {PAIRS_FILE}", self.root.display())))?;
        rows.iter()
            .map(|r| {
                let find = |p: &str| self.find(p).ok_or_else(|| Error::data(format!("pair refers to unknown image {p}")));
                if r.same > 1 {
                    return Err(Error::data(format!("pair flag must be 0 or 1, got {}", r.same)));
                }
                Ok(Pair { a: find(&r.img_a)?, b: find(&r.img_b)?, same: r.same == 1 })
            })
            .collect()
    }

    /// Entries grouped by `(split, identity)`, in index order.
    pub fn sequences(&self, indices: &[usize]) -> Vec<Vec<usize>> {
        let mut groups: Vec<((Option<Split>, Option<&str>), Vec<usize>)> = Vec::new();
        for &i in indices {
            let e = &self.entries[i];
            let key = (e.split, e.identity.as_deref());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, g)) => g.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        groups.into_iter().map(|(_, g)| g).collect()
    }

    /// Decodes `indices` into `[N,3,64,64]`.
    pub fn load(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let maps: Vec<Map<f32>> = indices.par_iter().map(|&i| imageio::load_image(self.root.join(&self.entries[i].path))).collect::<Result<_>>()?;
        let side = imageio::SIDE;
        let mut data = Vec::with_capacity(maps.len() * 3 * side * side);
        for m in maps {
            data.extend(m.data);
        }
        Ok(Tensor::from_vec(&[indices.len(), 3, side, side], data))
    }
}

/// Relative path of a synthetic frame.
pub fn synth_path(split: Split, identity: usize, frame: usize) -> String {
    format!("{}/{identity:04}/{frame:04}.png", split.tag())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub generator_version: String,
    pub seed: u64,
    pub identities: usize,
    pub frames: usize,
    pub train_identities: usize,
    pub eval_identities: usize,
    pub images: usize,
    pub pairs: usize,
}

/// Renders the corpus under `out` and writes labels, eval-split pairs and the manifest.
pub fn write_synth_corpus(out: &Path, cfg: &SynthConfig, pairs_per_class: usize) -> Result<Manifest> {
    let labels = synth::corpus_labels(cfg)?;
    if cfg.resolution != imageio::SIDE {
        return Err(Error::usage(format!("corpus resolution must be {}", imageio::SIDE)));
    }
    (0..cfg.identities).into_par_iter().try_for_each(|id| -> Result<()> {
        let ident = synth::gen_identity(id, cfg.identity_seed(id), cfg.resolution);
        for label in &labels[id * cfg.frames..(id + 1) * cfg.frames] {
            let path = out.join(synth_path(label.split, id, label.frame));
            let dir = path.parent().expect("frame paths have a parent");
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
            let img = synth::render_frame(&ident, label)?.image;
            let img = Map::new(img.channels, img.height, img.width, img.data.iter().map(|&v| v as f32).collect());
            imageio::write_png(&path, &img)?;
        }
        Ok(())
    })?;
    let rows: Vec<LabelRow> = labels.iter().map(LabelRow::from).collect();
    write_csv(&out.join(LABELS_FILE), &rows)?;
    let eval: Vec<FrameLabel> = labels.iter().filter(|l| l.split == Split::Eval).copied().collect();
    let pairs: Vec<PairRow> = synth::sample_pairs(&eval, pairs_per_class, cfg.seed)
        .into_iter()
        .map(|(a, b, same)| PairRow {
            img_a: synth_path(Split::Eval, eval[a].identity, eval[a].frame),
            img_b: synth_path(Split::Eval, eval[b].identity, eval[b].frame),
            same: same as u8,
        })
        .collect();
    write_csv(&out.join(PAIRS_FILE), &pairs)?;
    let (train, eval_ids) = cfg.split();
    let manifest = Manifest {
        generator: "latentface-synth".into(),
        generator_version: GENERATOR_VERSION.into(),
        seed: cfg.seed,
        identities: cfg.identities,
        frames: cfg.frames,
        train_identities: train.len(),
        eval_identities: eval_ids.len(),
        images: labels.len(),
        pairs: pairs.len(),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_layouts() {
        let e = Entry::parse("eval/0012/0003.png".into());
        assert_eq!(e.key(), Some((Split::Eval, 12, 3)));
        let e = Entry::parse("alice/x.png".into());
        assert_eq!((e.split, e.identity.as_deref(), e.frame.as_deref()), (None, Some("alice"), Some("x")));
        let e = Entry::parse("loose.png".into());
        assert_eq!(e.identity, None);
    }

    #[test]
    fn labels_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { identities: 3, frames: 2, seed: 5, ..Default::default() };
        let rows: Vec<LabelRow> = synth::corpus_labels(&cfg).unwrap().iter().map(LabelRow::from).collect();
        let p = dir.path().join("labels.csv");
        write_csv(&p, &rows).unwrap();
        let header = fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("split,identity,frame,class,magnitude,yaw,pitch,roll,tx,ty,tz,ka,kd,lx,ly\n"));
        assert_eq!(read_csv::<LabelRow>(&p).unwrap(), rows);
    }
}
