use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bbox::{serialize_bbox, BBox};
use super::scene::{Color, ObjectClass, PixelBox, SceneAnnotation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Image captioning.
    IC,
    /// Visual question answering.
    VQA,
    /// Visual grounding of a referring expression.
    VG,
    /// Object counting.
    OC,
    /// Scene classification.
    SC,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::IC, Task::VQA, Task::VG, Task::OC, Task::SC];

    pub fn name(self) -> &'static str {
        match self {
            Task::IC => "IC",
            Task::VQA => "VQA",
            Task::VG => "VG",
            Task::OC => "OC",
            Task::SC => "SC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown task `{s}`")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Local,
    Global,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Local => "local",
            Granularity::Global => "global",
        }
    }
}

/// Origin of an augmented record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub edit_type: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image_id: String,
    pub task: Task,
    pub instruction: String,
    pub target: String,
    pub bbox: Option<PixelBox>,
    pub granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

pub const CAPTION_PROMPTS: [&str; 3] = [
    "Describe the image in one sentence.",
    "Write a short caption for this image.",
    "What does this image show?",
];

pub const SCENE_PROMPT: &str = "Which scene does this image belong to?";

pub fn counting_prompt(class: ObjectClass) -> String {
    format!("How many {} are there?", class.plural())
}

pub fn grounding_prompt(expression: &str) -> String {
    format!("[refer] Where is <p> {expression} </p>?")
}

fn count_phrase(n: usize, class: ObjectClass) -> String {
    format!("{n} {}", if n == 1 { class.name() } else { class.plural() })
}

/// `a <background> scene with <n> <class> and ...`, classes in fixed order.
pub fn caption(scene: &SceneAnnotation) -> String {
    let parts: Vec<String> = scene
        .class_counts()
        .into_iter()
        .map(|(c, n)| count_phrase(n, c))
        .collect();
    let body = if parts.is_empty() {
        "no objects".to_string()
    } else {
        parts.join(" and ")
    };
    format!("a {} scene with {body}", scene.background.name())
}

fn unsupported(task: Task, reason: &str) -> Error {
    Error::UnsupportedTask {
        task: task.name().into(),
        reason: reason.into(),
    }
}

fn record(scene: &SceneAnnotation, task: Task, instruction: String, target: String, granularity: Granularity) -> InstructionRecord {
    InstructionRecord {
        image_id: scene.id.clone(),
        task,
        instruction,
        target,
        bbox: None,
        granularity,
        provenance: None,
    }
}

/// Grounding record for object `idx`, whose (colour, class, cell) must be
/// unique in the scene.
pub fn grounding_record(scene: &SceneAnnotation, idx: usize) -> Result<InstructionRecord> {
    if !scene.unique_referents().contains(&idx) {
        return Err(unsupported(Task::VG, "referent is not unique"));
    }
    let o = &scene.objects[idx];
    let mut r = record(
        scene,
        Task::VG,
        grounding_prompt(&o.expression()),
        serialize_bbox(&BBox::from(o.bbox), scene.image_size),
        Granularity::Local,
    );
    r.bbox = Some(o.bbox);
    Ok(r)
}

pub fn counting_record(scene: &SceneAnnotation, class: ObjectClass) -> InstructionRecord {
    record(
        scene,
        Task::OC,
        counting_prompt(class),
        scene.count(class).to_string(),
        Granularity::Local,
    )
}

/// Builds one instruction record of `task` from the annotation.
pub fn to_instruction<R: Rng>(scene: &SceneAnnotation, task: Task, rng: &mut R) -> Result<InstructionRecord> {
    match task {
        Task::SC => Ok(record(
            scene,
            task,
            SCENE_PROMPT.into(),
            scene.background.name().into(),
            Granularity::Global,
        )),
        Task::IC => Ok(record(
            scene,
            task,
            CAPTION_PROMPTS.choose(rng).expect("non-empty").to_string(),
            caption(scene),
            Granularity::Global,
        )),
        Task::OC => {
            let present: Vec<ObjectClass> = scene.class_counts().into_keys().collect();
            let class = *present.choose(rng).ok_or_else(|| unsupported(task, "no countable objects"))?;
            Ok(counting_record(scene, class))
        }
        Task::VG => {
            let idx = *scene
                .unique_referents()
                .choose(rng)
                .ok_or_else(|| unsupported(task, "no uniquely describable object"))?;
            grounding_record(scene, idx)
        }
        Task::VQA => vqa(scene, rng),
    }
}

fn vqa<R: Rng>(scene: &SceneAnnotation, rng: &mut R) -> Result<InstructionRecord> {
    let unique_pairs: Vec<usize> = (0..scene.objects.len())
        .filter(|i| {
            let a = &scene.objects[*i];
            scene.objects.iter().filter(|b| b.class == a.class && b.color == a.color).count() == 1
        })
        .collect();
    let mut families = vec![0, 1];
    if !unique_pairs.is_empty() {
        families.push(2);
    }
    match *families.choose(rng).expect("non-empty") {
        0 => {
            let present = |c: Color, k: ObjectClass| scene.objects.iter().any(|o| o.color == c && o.class == k);
            let want_yes = !scene.objects.is_empty() && rng.random_bool(0.5);
            let (color, class) = if want_yes {
                let o = scene.objects.choose(rng).expect("non-empty");
                (o.color, o.class)
            } else {
                let mut absent: Vec<(Color, ObjectClass)> = Color::ALL
                    .iter()
                    .flat_map(|c| ObjectClass::ALL.iter().map(move |k| (*c, *k)))
                    .filter(|(c, k)| !present(*c, *k))
                    .collect();
                absent.shuffle(rng);
                absent[0]
            };
            Ok(record(
                scene,
                Task::VQA,
                format!("Is there a {} {} in the image?", color.name(), class.name()),
                if present(color, class) { "yes" } else { "no" }.into(),
                Granularity::Global,
            ))
        }
        1 => {
            let mut classes = ObjectClass::ALL.to_vec();
            classes.shuffle(rng);
            let (a, b) = (classes[0], classes[1]);
            Ok(record(
                scene,
                Task::VQA,
                format!("Are there more {} than {}?", a.plural(), b.plural()),
                if scene.count(a) > scene.count(b) { "yes" } else { "no" }.into(),
                Granularity::Global,
            ))
        }
        _ => {
            let o = &scene.objects[*unique_pairs.choose(rng).expect("non-empty")];
            Ok(record(
                scene,
                Task::VQA,
                format!("Which part of the image contains the {} {}?", o.color.name(), o.class.name()),
                o.position.phrase().into(),
                Granularity::Local,
            ))
        }
    }
}
