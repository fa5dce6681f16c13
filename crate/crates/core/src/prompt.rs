//! Text prompts conditioning the inpainting generator: one per box (the
//! category name) and one per image (`"a c1, a c2 and a cn"`).

use thiserror::Error;

use crate::dataset::{Dataset, InstanceAnnotation};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("empty category name")]
    EmptyName,
    #[error("image prompt needs at least one category")]
    EmptyList,
    #[error("annotation {annotation_id} has unknown category {category_id}")]
    UnknownCategory { annotation_id: u64, category_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub image_prompt: String,
    /// `(annotation_id, prompt)` in annotation order.
    pub box_prompts: Vec<(u64, String)>,
}

/// Box-level prompt: the category name, lowercased, underscores as spaces.
pub fn box_prompt(category_name: &str) -> Result<String, PromptError> {
    let name = category_name.trim();
    if name.is_empty() {
        return Err(PromptError::EmptyName);
    }
    Ok(name.to_lowercase().replace('_', " "))
}

/// Image-level prompt. The article is always "a"; duplicates are kept and the
/// last item is joined with " and " without a serial comma.
pub fn image_prompt<S: AsRef<str>>(category_names: &[S]) -> Result<String, PromptError> {
    let items = category_names
        .iter()
        .map(|n| box_prompt(n.as_ref()).map(|p| format!("a {p}")))
        .collect::<Result<Vec<_>, _>>()?;
    match items.split_last() {
        None => Err(PromptError::EmptyList),
        Some((last, [])) => Ok(last.clone()),
        Some((last, init)) => Ok(format!("{} and {last}", init.join(", "))),
    }
}

/// Prompts for one image's annotations, in the given order.
pub fn build_prompts(
    dataset: &Dataset,
    annotations: &[&InstanceAnnotation],
) -> Result<PromptSet, PromptError> {
    let mut names = Vec::with_capacity(annotations.len());
    let mut box_prompts = Vec::with_capacity(annotations.len());
    for a in annotations {
        let cat = dataset.category(a.category_id).ok_or(PromptError::UnknownCategory {
            annotation_id: a.id,
            category_id: a.category_id,
        })?;
        box_prompts.push((a.id, box_prompt(&cat.name)?));
        names.push(cat.name.as_str());
    }
    let image_prompt = if names.is_empty() { String::new() } else { image_prompt(&names)? };
    Ok(PromptSet { image_prompt, box_prompts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent template oracle: "a x" items, comma separated, final " and ".
    fn template(names: &[&str]) -> String {
        let n = names.len();
        let mut out = String::new();
        for (i, name) in names.iter().enumerate() {
            if i > 0 {
                out.push_str(if i == n - 1 { " and " } else { ", " });
            }
            out.push_str("a ");
            out.push_str(name);
        }
        out
    }

    #[test]
    fn box_prompt_normalizes() {
        assert_eq!(box_prompt("cat").unwrap(), "cat");
        assert_eq!(box_prompt("hot_dog").unwrap(), "hot dog");
        assert_eq!(box_prompt("Traffic_Light").unwrap(), "traffic light");
        assert_eq!(box_prompt(""), Err(PromptError::EmptyName));
    }

    #[test]
    fn image_prompt_grammar() {
        assert_eq!(image_prompt(&["cat"]).unwrap(), "a cat");
        assert_eq!(image_prompt(&["cat", "dog"]).unwrap(), "a cat and a dog");
        assert_eq!(image_prompt(&["cat", "dog", "car"]).unwrap(), "a cat, a dog and a car");
        assert_eq!(image_prompt(&["cat", "dog", "car"]).unwrap(), template(&["cat", "dog", "car"]));
        assert_eq!(image_prompt(&["cat", "cat", "cat"]).unwrap(), "a cat, a cat and a cat");
        assert_eq!(image_prompt(&["apple"]).unwrap(), "a apple");
        assert_eq!(image_prompt::<&str>(&[]), Err(PromptError::EmptyList));
    }

    proptest! {
        #[test]
        fn image_prompt_matches_template(names in prop::collection::vec("[a-z]{1,6}", 1..7)) {
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            prop_assert_eq!(image_prompt(&refs).unwrap(), template(&refs));
        }

        #[test]
        fn each_name_counted(names in prop::collection::vec(prop::sample::select(vec!["cat", "dog", "hot_dog"]), 1..8)) {
            let p = image_prompt(&names).unwrap();
            let items: Vec<&str> = p.split(", ").flat_map(|s| s.split(" and ")).collect();
            prop_assert_eq!(items.len(), names.len());
            for (item, name) in items.iter().zip(&names) {
                prop_assert_eq!(item.to_string(), format!("a {}", name.replace('_', " ")));
            }
        }
    }
}
