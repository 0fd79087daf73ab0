use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use super::instruct::{to_instruction, InstructionRecord, Task};
use super::scene::{generate_scene, SceneAnnotation, SceneSpec};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

    /// First scene seed of the split; the two splits occupy disjoint halves
    /// of the corpus seed's 2^32 block.
    pub fn seed_base(self, seed: u64) -> u64 {
        (seed << 32)
            + match self {
                Split::Train => 0,
                Split::Test => 1 << 31,
            }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub tasks: Vec<Task>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            train_per_task: 2000,
            test_per_task: 200,
            tasks: Task::ALL.to_vec(),
        }
    }
}

/// Image, annotation and the records built on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub scene: SceneAnnotation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub samples: Vec<Sample>,
    pub records: Vec<InstructionRecord>,
}

impl SplitData {
    pub fn image_index(&self) -> BTreeMap<&str, usize> {
        self.samples.iter().enumerate().map(|(i, s)| (s.scene.id.as_str(), i)).collect()
    }

    pub fn task_counts(&self) -> BTreeMap<Task, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.task).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub seed_start: u64,
    /// One past the last scene seed examined.
    pub seed_end: u64,
    pub scenes: usize,
    pub skipped_scenes: usize,
    pub records: BTreeMap<Task, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub vocab_size: usize,
    pub splits: Vec<SplitManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub train: SplitData,
    pub test: SplitData,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &SplitData {
        match s {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// RNG for the records of `task` on the scene with seed `scene_seed`.
pub fn record_rng(scene_seed: u64, task: Task) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    rng.set_stream(1 + task as u64);
    rng
}

fn build_split(cfg: &CorpusConfig, split: Split, quota: usize) -> Result<(SplitData, SplitManifest)> {
    let base = split.seed_base(cfg.seed);
    let mut data = SplitData::default();
    let mut skipped = 0;
    let mut i = 0u64;
    while data.samples.len() < quota {
        if i >= 1 << 31 {
            return Err(Error::Config("scene seed range exhausted".into()));
        }
        let seed = base + i;
        i += 1;
        let id = format!("{}-{seed:x}", split.name());
        let (image, scene) = generate_scene(&cfg.scene, &id, seed, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let records: Result<Vec<_>> = cfg
            .tasks
            .iter()
            .map(|t| to_instruction(&scene, *t, &mut record_rng(seed, *t)))
            .collect();
        match records {
            Ok(r) => {
                data.records.extend(r);
                data.samples.push(Sample { image, scene });
            }
            Err(Error::UnsupportedTask { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let manifest = SplitManifest {
        split,
        seed_start: base,
        seed_end: base + i,
        scenes: data.samples.len(),
        skipped_scenes: skipped,
        records: data.task_counts(),
    };
    Ok((data, manifest))
}

/// Generates both splits. Every accepted scene contributes exactly one
/// record per configured task; scenes that cannot support every task are
/// skipped.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.seed >= 1 << 32 {
        return Err(Error::Config("corpus seed must be below 2^32".into()));
    }
    let (train, mt) = build_split(cfg, Split::Train, cfg.train_per_task)?;
    let (test, ms) = build_split(cfg, Split::Test, cfg.test_per_task)?;
    Ok(Corpus {
        manifest: Manifest {
            seed: cfg.seed,
            image_size: cfg.scene.image_size,
            vocab_size: Tokenizer::standard().len(),
            splits: vec![mt, ms],
        },
        train,
        test,
    })
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(io(path, fs::File::create(path))?);
    for it in items {
        let line = serde_json::to_string(it).map_err(|e| Error::Parse(e.to_string()))?;
        io(path, writeln!(w, "{line}"))?;
    }
    io(path, w.flush())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(io(path, fs::File::open(path))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = io(path, line)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Writes `<dir>/<split>/{records.jsonl,scenes.jsonl,images/*.ppm}`.
pub fn write_split(dir: &Path, split: Split, data: &SplitData) -> Result<()> {
    let sd = dir.join(split.name());
    let images = sd.join("images");
    io(&images, fs::create_dir_all(&images))?;
    write_jsonl(&sd.join("records.jsonl"), &data.records)?;
    let scenes: Vec<&SceneAnnotation> = data.samples.iter().map(|s| &s.scene).collect();
    write_jsonl(&sd.join("scenes.jsonl"), &scenes)?;
    for s in &data.samples {
        s.image.save_ppm(&images.join(format!("{}.ppm", s.scene.id)))?;
    }
    Ok(())
}

pub fn read_split(dir: &Path, split: Split) -> Result<SplitData> {
    let sd = dir.join(split.name());
    let records: Vec<InstructionRecord> = read_jsonl(&sd.join("records.jsonl"))?;
    let scenes: Vec<SceneAnnotation> = read_jsonl(&sd.join("scenes.jsonl"))?;
    let mut samples = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let image = RgbImage::load_ppm(&sd.join("images").join(format!("{}.ppm", scene.id)))?;
        samples.push(Sample { image, scene });
    }
    let data = SplitData { samples, records };
    let ids = data.image_index();
    if let Some(r) = data.records.iter().find(|r| !ids.contains_key(r.image_id.as_str())) {
        return Err(Error::Parse(format!("record references unknown image `{}`", r.image_id)));
    }
    Ok(data)
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    io(dir, fs::create_dir_all(dir))?;
    let m = serde_json::to_string_pretty(&corpus.manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let mpath = dir.join("manifest.json");
    io(&mpath, fs::write(&mpath, m + "\n"))?;
    let vpath = dir.join("vocab.txt");
    io(&vpath, fs::write(&vpath, Tokenizer::standard().vocab().join("\n") + "\n"))?;
    write_split(dir, Split::Train, &corpus.train)?;
    write_split(dir, Split::Test, &corpus.test)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join("manifest.json");
    let text = io(&mpath, fs::read_to_string(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Corpus {
        manifest,
        train: read_split(dir, Split::Train)?,
        test: read_split(dir, Split::Test)?,
    })
}
