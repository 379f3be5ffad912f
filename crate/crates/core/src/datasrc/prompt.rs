//! Label-prompt construction from the 27-entry template table.
//!
//! Rendering replaces `{C}` with the class name; an optional style token
//! appends ` in the style of <token>` after the rendered template. Class
//! names must be single words so a rendered prompt parses back to a unique
//! (template, class) pair.

use crate::error::{Error, Result};
use crate::nnkit::rng::Rng;

/// The 27 prompt templates, each containing `{C}` exactly once.
pub const TEMPLATES: [&str; 27] = [
    "photo of a {C}.",
    "rendering of a {C}.",
    "cropped photo of the {C}.",
    "the photo of a {C}.",
    "photo of a clean {C}.",
    "photo of a dirty {C}.",
    "dark photo of the {C}.",
    "photo of my {C}.",
    "photo of the cool {C}.",
    "close-up photo of a {C}.",
    "bright photo of the {C}.",
    "cropped photo of a {C}.",
    "photo of the {C}.",
    "good photo of the {C}.",
    "photo of one {C}.",
    "close-up photo of the {C}.",
    "rendition of the {C}.",
    "photo of the clean {C}.",
    "rendition of a {C}.",
    "photo of a nice {C}.",
    "good photo of a {C}.",
    "photo of the nice {C}.",
    "photo of the small {C}.",
    "photo of the weird {C}.",
    "photo of the large {C}.",
    "photo of a cool {C}.",
    "photo of a small {C}.",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub class_name: String,
    pub template_index: usize,
    pub style_token: Option<String>,
    pub seed: u64,
}

/// Render a prompt spec. Deterministic; the class token appears exactly
/// once.
pub fn build_prompt(spec: &PromptSpec) -> Result<String> {
    if spec.class_name.is_empty() {
        return Err(Error::contract("prompt class name must not be empty"));
    }
    let Some(template) = TEMPLATES.get(spec.template_index) else {
        return Err(Error::contract(format!(
            "template index {} outside the {}-entry table",
            spec.template_index,
            TEMPLATES.len()
        )));
    };
    let mut prompt = template.replace("{C}", &spec.class_name);
    if let Some(token) = &spec.style_token {
        prompt.push_str(" in the style of ");
        prompt.push_str(token);
    }
    Ok(prompt)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub class_name: String,
    pub template_index: usize,
    pub style_token: Option<String>,
}

/// Recover (template index, class name, style token) from a rendered
/// prompt. Requires single-word class names, which makes the parse unique.
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt> {
    let (body, style_token) = match prompt.split_once(" in the style of ") {
        Some((body, token)) => (body, Some(token.to_string())),
        None => (prompt, None),
    };
    for (index, template) in TEMPLATES.iter().enumerate() {
        let (prefix, suffix) = template.split_once("{C}").expect("every template has {C}");
        if let Some(rest) = body.strip_prefix(prefix) {
            if let Some(class_name) = rest.strip_suffix(suffix) {
                if !class_name.is_empty() && !class_name.contains(' ') {
                    return Ok(ParsedPrompt {
                        class_name: class_name.to_string(),
                        template_index: index,
                        style_token,
                    });
                }
            }
        }
    }
    Err(Error::contract(format!(
        "prompt {prompt:?} does not match any template"
    )))
}

/// Draw a template uniformly with a seeded generator.
pub fn sample_prompt(class_name: &str, seed: u64) -> PromptSpec {
    let mut rng = Rng::new(seed).split(0x70726f6d7074); // "prompt"
    PromptSpec {
        class_name: class_name.to_string(),
        template_index: rng.below(TEMPLATES.len()),
        style_token: None,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_well_formed() {
        assert_eq!(TEMPLATES.len(), 27);
        for t in TEMPLATES {
            assert_eq!(t.matches("{C}").count(), 1, "{t}");
            assert!(t.ends_with('.'), "{t}");
        }
    }

    #[test]
    fn hamster_example() {
        // template 27 in the table (index 26)
        let spec = PromptSpec {
            class_name: "hamster".into(),
            template_index: 26,
            style_token: None,
            seed: 0,
        };
        assert_eq!(build_prompt(&spec).unwrap(), "photo of a small hamster.");
    }

    #[test]
    fn style_token_appends_after_rendered_template() {
        let spec = PromptSpec {
            class_name: "hamster".into(),
            template_index: 0,
            style_token: Some("<imnet>".into()),
            seed: 0,
        };
        assert_eq!(
            build_prompt(&spec).unwrap(),
            "photo of a hamster. in the style of <imnet>"
        );
    }

    #[test]
    fn deterministic_and_validating() {
        let spec = PromptSpec {
            class_name: "ruby".into(),
            template_index: 5,
            style_token: None,
            seed: 3,
        };
        assert_eq!(build_prompt(&spec).unwrap(), build_prompt(&spec).unwrap());
        let empty = PromptSpec {
            class_name: String::new(),
            ..spec.clone()
        };
        assert!(matches!(build_prompt(&empty), Err(Error::Contract(_))));
        let oob = PromptSpec {
            template_index: 27,
            ..spec
        };
        assert!(matches!(build_prompt(&oob), Err(Error::Contract(_))));
    }

    #[test]
    fn parse_recovers_every_rendering() {
        for class in ["hamster", "ruby", "azure"] {
            for index in 0..TEMPLATES.len() {
                for style in [None, Some("<imnet>".to_string())] {
                    let spec = PromptSpec {
                        class_name: class.into(),
                        template_index: index,
                        style_token: style.clone(),
                        seed: 0,
                    };
                    let rendered = build_prompt(&spec).unwrap();
                    let parsed = parse_prompt(&rendered).unwrap();
                    assert_eq!(parsed.class_name, class);
                    assert_eq!(parsed.template_index, index, "prompt {rendered:?}");
                    assert_eq!(parsed.style_token, style);
                }
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_roughly_uniform() {
        let a = sample_prompt("ruby", 42);
        let b = sample_prompt("ruby", 42);
        assert_eq!(a, b);
        let mut counts = [0usize; 27];
        for seed in 0..27_000u64 {
            counts[sample_prompt("ruby", seed).template_index] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (800..=1200).contains(&c),
                "template {i} drawn {c} times, expected 1000 +/- 20%"
            );
        }
    }
}
