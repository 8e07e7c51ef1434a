//! Prompt texts for the anchoring dialogue.
//!
//! Templates may use `{count}` (frame count in words, e.g. "ten") and `{last}`
//! (ordinal of the last frame, e.g. "tenth").

use serde::{Deserialize, Serialize};

use crate::annotate::StoreEntry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptBundle {
    pub describe_prompt: String,
    pub categorize_prompt: String,
    pub keyframe_definition: String,
    pub format_instruction: String,
    pub examples_header: String,
    /// Single-prompt variant, also the last turn of the three-step dialogue.
    pub one_step_prompt: String,
    pub three_step_describe_prompt: String,
    pub three_step_count_prompt: String,
}

impl Default for PromptBundle {
    fn default() -> Self {
        PromptBundle {
            describe_prompt: "Please briefly describe the content of this audio.".into(),
            categorize_prompt: "Which categories of sound-producing objects can be heard in this audio? \
                                Answer with the category names."
                .into(),
            keyframe_definition: "When the category, timbre, and quantity of the current frame audio differ \
                                  from the previous frame, we call the current frame a keyframe."
                .into(),
            format_instruction: "The audio frames are evenly divided into {count} frames, keyframes are marked \
                                 as 1, and non-key frames are marked as 0. Please output the categories of these \
                                 {count} frames in order from the first frame to the {last} frame in the format \
                                 of a list."
                .into(),
            examples_header: "Annotated examples of audio with the same category:".into(),
            one_step_prompt: "Divide the audio into {count} frames. Assume the audio category of the first frame \
                              is 1. If the category of the current frame matches the previous frame, output 0; \
                              otherwise, output 1. Provide the categories of frames one through {count} in \
                              sequence, formatted as a list."
                .into(),
            three_step_describe_prompt: "Please describe the input audio.".into(),
            three_step_count_prompt: "How many different sound categories are present in the audio?".into(),
        }
    }
}

const ONES: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

const ORDINALS: [&str; 21] = [
    "zeroth", "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
    "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth", "seventeenth", "eighteenth",
    "nineteenth", "twentieth",
];

pub fn number_word(n: usize) -> String {
    ONES.get(n).map_or_else(|| n.to_string(), |s| s.to_string())
}

pub fn ordinal_word(n: usize) -> String {
    if let Some(s) = ORDINALS.get(n) {
        return s.to_string();
    }
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

pub fn fill_template(template: &str, frames: usize) -> String {
    template
        .replace("{count}", &number_word(frames))
        .replace("{last}", &ordinal_word(frames))
}

fn render_flags(flags: &[u8]) -> String {
    let items: Vec<String> = flags.iter().map(u8::to_string).collect();
    format!("[{}]", items.join(", "))
}

impl PromptBundle {
    pub fn render_examples(&self, examples: &[StoreEntry]) -> String {
        if examples.is_empty() {
            return String::new();
        }
        let mut out = self.examples_header.clone();
        for (i, e) in examples.iter().enumerate() {
            out.push_str(&format!(
                "\nExample {} ({} frames): {}",
                i + 1,
                e.control_points.len(),
                render_flags(e.control_points.flags())
            ));
        }
        out
    }

    /// Final retrieval-augmented prompt: definition, examples, then format instruction.
    pub fn control_prompt(&self, examples: &[StoreEntry], frames: usize) -> String {
        let mut parts = vec![self.keyframe_definition.clone()];
        let block = self.render_examples(examples);
        if !block.is_empty() {
            parts.push(block);
        }
        parts.push(fill_template(&self.format_instruction, frames));
        parts.join("\n")
    }

    pub fn one_step(&self, frames: usize) -> String {
        fill_template(&self.one_step_prompt, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ControlPointList;

    #[test]
    fn ten_frames_render_the_reference_wording() {
        let p = PromptBundle::default();
        let s = fill_template(&p.format_instruction, 10);
        assert!(s.starts_with("The audio frames are evenly divided into ten frames"));
        assert!(s.contains("these ten frames in order from the first frame to the tenth frame in the format of a list."));
        let one = p.one_step(5);
        assert!(one.starts_with("Divide the audio into five frames."));
        assert!(one.ends_with("frames one through five in sequence, formatted as a list."));
    }

    #[test]
    fn words() {
        assert_eq!(number_word(3), "three");
        assert_eq!(number_word(48), "48");
        assert_eq!(ordinal_word(21), "21st");
        assert_eq!(ordinal_word(112), "112th");
        assert_eq!(ordinal_word(33), "33rd");
    }

    #[test]
    fn examples_block_lists_flags() {
        let p = PromptBundle::default();
        let e = StoreEntry {
            video_id: "v".into(),
            control_points: ControlPointList::new(vec![1, 0, 1]).unwrap(),
        };
        let prompt = p.control_prompt(&[e], 3);
        assert!(prompt.contains("Example 1 (3 frames): [1, 0, 1]"));
        assert!(prompt.starts_with(&p.keyframe_definition));
        assert!(!p.control_prompt(&[], 3).contains("Example"));
    }
}
