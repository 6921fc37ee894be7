//! Prompt and statement templates.
//!
//! Slot quotes are the typographic pair `“ ”`. Statement templates are
//! byte-exact; prompts sent to models carry their slot values verbatim.

use crate::statements::TemplateId;

pub const OPEN_QUOTE: char = '“';
pub const CLOSE_QUOTE: char = '”';

pub const ANALYZE_PROMPT: &str = "You are an Emotional Perception Expert. Please analyze the emotions that might be evoked by the given image. Your analysis should explore a wide range of visual attributes, such as brightness, colorfulness, depicted scenes, objects, human actions, and facial expressions. Additionally, provide detailed explanations linking these attributes to the emotions they may trigger. If applicable, discuss any potential cultural or psychological factors influencing these emotional responses.";

pub const EXTRACT_PROMPT: &str = "You are an Emotional Perception Expert. Your task is to extract all applicable emotions as comprehensively as possible based on the image description. Focus on distinct emotions such as happiness, sadness, fear, anger, etc. Keep the list concise, with a maximum of 10 distinct emotions.";

/// Separator between the extraction instruction and the analysis text.
pub const DESCRIPTION_HEADER: &str = "\n\nImage description:\n";

pub const EVAL_PROMPT: &str = "Based on the provided image and emotional statement, please determine whether the statement aligns with the content of the image. If it does, respond with Correct. If it does not, respond with Incorrect.";

/// Separator between the evaluation instruction and the statement.
pub const STATEMENT_HEADER: &str = "\n\nStatement: ";

pub const POSITIVE_POLARITY: &str = "Upon viewing this image, observers, despite various individual or contextual factors, are most likely to experience positive emotions.";
pub const NEGATIVE_POLARITY: &str = "Upon viewing this image, observers, despite various individual or contextual factors, are most likely to experience negative emotions.";
pub const MIXED_POLARITY: &str = "Upon viewing this image, observers are equally likely to experience either positive or negative emotions, depending on individual or contextual factors.";

fn quoted(value: &str) -> String {
    format!("{OPEN_QUOTE}{value}{CLOSE_QUOTE}")
}

pub fn extract_prompt(analysis: &str) -> String {
    format!("{EXTRACT_PROMPT}{DESCRIPTION_HEADER}{analysis}")
}

pub fn filter_prompt(word: &str) -> String {
    format!(
        "You are tasked with determining whether the word {} describes a specific emotional state. An emotional state is a psychological condition involving feelings and reactions triggered by internal or external events. Respond with {} if the word aligns with this definition, or {} otherwise. The output format should be {{{}: {}}}.",
        quoted(word),
        quoted("Yes"),
        quoted("No"),
        quoted("word"),
        quoted("response"),
    )
}

/// The category count is taken from `categories` rather than hard-coded.
pub fn attach_prompt(word: &str, categories: &[&str]) -> String {
    format!(
        "You are tasked with assigning the word {} to the most closely related emotional category from the following {} predefined options: {}. Consider broader semantic connections and possible emotional nuances when making your judgment. If the word cannot reasonably fit any category, respond with {}. Do not create or assign new categories outside of the provided list. Do not provide any explanations or reasons for your choice. The output format should be {{{}: {}}}.",
        quoted(word),
        categories.len(),
        quoted(&categories.join(", ")),
        quoted("not applicable"),
        quoted("word"),
        quoted("response"),
    )
}

pub fn interpretation_prompt(emotion: &str) -> String {
    format!(
        "Briefly explain why this image might evoke {} in viewers, without mentioning any other emotions.",
        quoted(emotion)
    )
}

pub fn context_prompt(emotion: &str) -> String {
    format!(
        "Imagine a background story for the image that would evoke a sense of {} in viewers. Respond in one sentence. Do not mention the content in the image.",
        quoted(emotion)
    )
}

pub fn character_prompt(emotion: &str) -> String {
    format!(
        "Imagine a character who would feel {} when viewing this image. Include details such as their age, gender, profession, and other relevant traits. Describe the character in one concise sentence without further explanation.",
        quoted(emotion)
    )
}

pub fn interpretation_conclusion(emotion: &str) -> String {
    format!("Therefore, the image might evoke {} in viewers.", quoted(emotion))
}

pub fn context_statement(context: &str, emotion: &str) -> String {
    format!(
        "In the context of: {}, the image is likely to evoke a sense of {}.",
        quoted(context),
        quoted(emotion)
    )
}

pub fn subjectivity_statement(role: &str, preferred: &str, other: &str) -> String {
    format!(
        "Upon viewing the image, {} is more inclined to feel {} compared to {}.",
        quoted(role),
        quoted(preferred),
        quoted(other)
    )
}

pub fn polarity_statement(template: TemplateId) -> Option<&'static str> {
    match template {
        TemplateId::PositivePolarity => Some(POSITIVE_POLARITY),
        TemplateId::NegativePolarity => Some(NEGATIVE_POLARITY),
        TemplateId::MixedPolarity => Some(MIXED_POLARITY),
        _ => None,
    }
}

pub fn eval_prompt(statement: &str) -> String {
    format!("{EVAL_PROMPT}{STATEMENT_HEADER}{statement}")
}

/// Which pipeline prompt a request carries. Used by the mock backend and the
/// run log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Analyze,
    Extract,
    Filter,
    Attach,
    Interpretation,
    Context,
    Character,
    Judgment,
    Other,
}

impl PromptKind {
    pub fn detect(user_text: &str) -> Self {
        if user_text.starts_with(ANALYZE_PROMPT) {
            PromptKind::Analyze
        } else if user_text.starts_with(EXTRACT_PROMPT) {
            PromptKind::Extract
        } else if user_text.starts_with("You are tasked with determining whether the word") {
            PromptKind::Filter
        } else if user_text.starts_with("You are tasked with assigning the word") {
            PromptKind::Attach
        } else if user_text.starts_with("Briefly explain why this image might evoke") {
            PromptKind::Interpretation
        } else if user_text.starts_with("Imagine a background story for the image") {
            PromptKind::Context
        } else if user_text.starts_with("Imagine a character who would feel") {
            PromptKind::Character
        } else if user_text.starts_with(EVAL_PROMPT) {
            PromptKind::Judgment
        } else {
            PromptKind::Other
        }
    }
}

/// Text of the first `“…”` slot in `text`.
pub fn first_slot(text: &str) -> Option<&str> {
    let start = text.find(OPEN_QUOTE)? + OPEN_QUOTE.len_utf8();
    let len = text[start..].find(CLOSE_QUOTE)?;
    Some(&text[start..start + len])
}
