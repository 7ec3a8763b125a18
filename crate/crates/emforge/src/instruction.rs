//! Task registry and instruction templating.
//!
//! Queries render as `[IMG] Instruct: {definition}\nQuery: {text}` (the image
//! marker is omitted for text-only queries, the text segment is empty for
//! image-only queries). Targets render as their optional target-side
//! instruction followed by the raw content.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::tokenizer::IMG_MARKER;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum MetaTask {
    Classification,
    Vqa,
    Retrieval,
    Grounding,
}

impl MetaTask {
    pub const ALL: [MetaTask; 4] = [
        MetaTask::Classification,
        MetaTask::Vqa,
        MetaTask::Retrieval,
        MetaTask::Grounding,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MetaTask::Classification => "classification",
            MetaTask::Vqa => "vqa",
            MetaTask::Retrieval => "retrieval",
            MetaTask::Grounding => "grounding",
        }
    }
}

impl std::fmt::Display for MetaTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Modality combination of one side of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "I")]
    Image,
    #[serde(rename = "I+T")]
    ImageText,
}

impl Modality {
    pub fn wants_text(self) -> bool {
        matches!(self, Modality::Text | Modality::ImageText)
    }

    pub fn wants_image(self) -> bool {
        matches!(self, Modality::Image | Modality::ImageText)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub meta_task: MetaTask,
    /// One-sentence instruction for the query side.
    pub definition: String,
    pub query_modality: Modality,
    pub target_modality: Modality,
    #[serde(default)]
    pub ood: bool,
    #[serde(default)]
    pub target_instruction: Option<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::Data("task_id must be non-empty".into()));
        }
        if self.definition.is_empty() {
            return Err(Error::Data(format!(
                "task {} has an empty instruction definition",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// All known tasks, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, TaskSpec>,
}

impl TaskRegistry {
    pub fn from_tasks(tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tasks {
            t.validate()?;
            if map.insert(t.task_id.clone(), t.clone()).is_some() {
                return Err(Error::Data(format!("duplicate task_id {}", t.task_id)));
            }
        }
        Ok(Self { tasks: map })
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskSpec> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::Data(format!("unknown task_id {task_id}")))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn merge(&mut self, other: TaskRegistry) -> Result<()> {
        for (id, task) in other.tasks {
            if let Some(existing) = self.tasks.get(&id) {
                if *existing != task {
                    return Err(Error::Data(format!(
                        "conflicting definitions for task_id {id}"
                    )));
                }
            }
            self.tasks.insert(id, task);
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let tasks: Vec<TaskSpec> = serde_json::from_str(json)
            .map_err(|e| Error::Data(format!("bad task registry JSON: {e}")))?;
        Self::from_tasks(tasks)
    }

    pub fn to_json(&self) -> String {
        let tasks: Vec<&TaskSpec> = self.tasks.values().collect();
        serde_json::to_string_pretty(&tasks).expect("registry serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read task registry {}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Rendered model input: text with at most one `[IMG]` marker, plus the
/// path of the raw image blob when one is attached.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FormattedInput {
    pub text: String,
    pub image: Option<String>,
}

fn check_modality(
    side: &str,
    task: &TaskSpec,
    modality: Modality,
    text: Option<&str>,
    image: Option<&str>,
) -> Result<()> {
    if modality.wants_text() != text.is_some() || modality.wants_image() != image.is_some() {
        return Err(Error::Data(format!(
            "task {} {side} modality {:?} does not match content (text: {}, image: {})",
            task.task_id,
            modality,
            text.is_some(),
            image.is_some()
        )));
    }
    Ok(())
}

fn with_marker(body: String, image: Option<&str>) -> FormattedInput {
    let text = match image {
        Some(_) if body.is_empty() => IMG_MARKER.to_string(),
        Some(_) => format!("{IMG_MARKER} {body}"),
        None => body,
    };
    FormattedInput {
        text,
        image: image.map(str::to_string),
    }
}

/// Renders a query. With instructions the template is
/// `[IMG] Instruct: {definition}\nQuery: {text}`; without (the ablation
/// mode) only the raw query content remains.
pub fn format_query(
    task: &TaskSpec,
    query_text: Option<&str>,
    query_image: Option<&str>,
    with_instruction: bool,
) -> Result<FormattedInput> {
    check_modality("query", task, task.query_modality, query_text, query_image)?;
    let raw = query_text.unwrap_or("");
    let body = if with_instruction {
        format!("Instruct: {}\nQuery: {raw}", task.definition)
    } else {
        raw.to_string()
    };
    Ok(with_marker(body, query_image))
}

/// Renders a target: optional target-side instruction, then the content.
pub fn format_target(
    task: &TaskSpec,
    target_text: Option<&str>,
    target_image: Option<&str>,
) -> Result<FormattedInput> {
    check_modality(
        "target",
        task,
        task.target_modality,
        target_text,
        target_image,
    )?;
    let mut parts: Vec<&str> = Vec::new();
    if let Some(instr) = task.target_instruction.as_deref() {
        parts.push(instr);
    }
    if let Some(t) = target_text {
        parts.push(t);
    }
    Ok(with_marker(parts.join("\n"), target_image))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(query: Modality, target: Modality) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            meta_task: MetaTask::Classification,
            definition: "Identify the object shown in the image.".into(),
            query_modality: query,
            target_modality: target,
            ood: false,
            target_instruction: None,
        }
    }

    #[test]
    fn image_only_query_with_instruction() {
        let t = task(Modality::Image, Modality::Text);
        let f = format_query(&t, None, Some("img.emt"), true).unwrap();
        assert_eq!(
            f.text,
            "[IMG] Instruct: Identify the object shown in the image.\nQuery: "
        );
        assert_eq!(f.image.as_deref(), Some("img.emt"));
    }

    #[test]
    fn ablation_mode_is_raw_passthrough() {
        let t = task(Modality::Text, Modality::Text);
        let f = format_query(&t, Some("red bus"), None, false).unwrap();
        assert_eq!(f.text, "red bus");
        assert_eq!(f.image, None);
    }

    #[test]
    fn image_text_query_has_one_marker_before_instruct() {
        let t = task(Modality::ImageText, Modality::Text);
        let f = format_query(&t, Some("what is it"), Some("img.emt"), true).unwrap();
        assert_eq!(f.text.matches(IMG_MARKER).count(), 1);
        assert!(f.text.starts_with("[IMG] Instruct: "));
        assert!(f.text.ends_with("\nQuery: what is it"));
    }

    #[test]
    fn image_target_with_instruction() {
        let mut t = task(Modality::Text, Modality::Image);
        t.target_instruction = Some("Represent the given image.".into());
        let f = format_target(&t, None, Some("crop.emt")).unwrap();
        assert_eq!(f.text, "[IMG] Represent the given image.");
    }

    #[test]
    fn plain_label_target_is_passthrough() {
        let t = task(Modality::Image, Modality::Text);
        let f = format_target(&t, Some("bus"), None).unwrap();
        assert_eq!(f.text, "bus");
    }

    #[test]
    fn interleaved_target_orders_marker_instruction_text() {
        let mut t = task(Modality::Text, Modality::ImageText);
        t.target_instruction = Some("Represent the passage.".into());
        let f = format_target(&t, Some("wiki text"), Some("img.emt")).unwrap();
        assert_eq!(f.text, "[IMG] Represent the passage.\nwiki text");
    }

    #[test]
    fn modality_mismatch_rejected() {
        let t = task(Modality::Image, Modality::Text);
        assert!(format_query(&t, Some("text"), None, true).is_err());
        assert!(format_query(&t, None, None, true).is_err());
        assert!(format_target(&t, None, Some("img.emt")).is_err());
    }

    #[test]
    fn registry_roundtrip_and_duplicates() {
        let reg =
            TaskRegistry::from_tasks(vec![task(Modality::Image, Modality::Text)]).unwrap();
        let back = TaskRegistry::from_json(&reg.to_json()).unwrap();
        assert_eq!(back.get("t").unwrap(), reg.get("t").unwrap());

        let dup = TaskRegistry::from_tasks(vec![
            task(Modality::Image, Modality::Text),
            task(Modality::Image, Modality::Text),
        ]);
        assert!(dup.is_err());
    }
}
