//! Feature extraction: one structured profile per image.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::backend::{MessagePart, ModelClient, ModelRequest, RoleTag};
use crate::json::extract_json;
use crate::model::{ImageProfile, ImageRef, ImageStore, ObjectEntry, ATTRIBUTE_VOCABULARY};
use crate::stage::{QuarantineEntry, StageError};

pub const EXTRACTION_PROMPT: &str = r#"You are a visual description expert. Please provide a detailed, comprehensive, and natural language description of the following image, covering every visible detail.

        Overall View:
        - Summarize the scene in 1-2 sentences, focusing on the general setting, lighting, time of day, and the environment. Ensure to include the general mood and ambiance.

        Main Objects:
        - For each key object, describe these aspects in fluent natural language:
            - What is it (e.g., a person, a car, a building)?
            - Quantity, color, size, shape, material, texture, and any distinctive features.
            - Where is it located (foreground, center, background)?
            - State/Function: Is it active or stationary? What is its function in the scene?

        Secondary Objects and Background:
        - Describe smaller or less prominent objects and elements in the background. How do they relate to the main objects? Mention any supporting objects that add depth to the scene (e.g., objects on a table, items in the background, etc.).

        Object Interactions:
        - Highlight interactions or relationships between objects (e.g., people talking, animals interacting). Describe any dynamic actions or static arrangements.

        Text:
        - If there are text in the image, extract all the text and analyze its meanings.

        Atmosphere&Theme:
        - Convey the mood or theme of the scene, using descriptive adjectives (e.g., lively, serene, chaotic). If unsure, use "seems to" to indicate speculation about the tone.

        Detailed Natural Language Description:
        - Integrate all of the above details into a flowing, cohesive narrative. Ensure to describe every element in fine detail, maintaining clarity and logical structure. Avoid redundancy or skipping any visible detail."#;

pub const EXTRACTION_JSON_INSTRUCTION: &str = r#"Return your answer as a single JSON object with exactly these keys:
{
  "overall_view": "<Overall View>",
  "objects": [{"name": "<object>", "attributes": {"quantity": "", "color": "", "size": "", "shape": "", "material": "", "texture": "", "location": "", "state": "", "other": ""}}],
  "background": "<Secondary Objects and Background>",
  "interactions": "<Object Interactions>",
  "text": "<Text, empty if none>",
  "atmosphere": "<Atmosphere&Theme>",
  "narrative": "<Detailed Natural Language Description>"
}
Omit attributes that do not apply. Output only the JSON object."#;

/// Optional profile keys; `overall_view` is mandatory.
const OPTIONAL_KEYS: [&str; 6] = [
    "objects",
    "background",
    "interactions",
    "text",
    "atmosphere",
    "narrative",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileParseReport {
    pub profile: ImageProfile,
    pub warnings: Vec<String>,
    pub raw: String,
}

pub fn render_extraction_prompt(
    client: &ModelClient,
    image: &ImageRef,
    store: &ImageStore,
) -> Result<ModelRequest, StageError> {
    store.resolve(image)?;
    Ok(client.request(
        RoleTag::Extract,
        vec![
            MessagePart::Text {
                text: format!("{EXTRACTION_PROMPT}\n\n{EXTRACTION_JSON_INSTRUCTION}"),
            },
            MessagePart::Image { image: image.clone() },
        ],
    ))
}

fn normalize_key(k: &str) -> String {
    let k: String = k
        .trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    match k.trim_matches('_') {
        "overall_view" | "overview" | "overall" => "overall_view",
        "main_objects" | "objects" => "objects",
        "background" | "secondary_objects_and_background" | "secondary_objects" => "background",
        "interactions" | "object_interactions" => "interactions",
        "text" | "text_content" => "text",
        "atmosphere" | "atmosphere_theme" | "theme" => "atmosphere",
        "narrative" | "detailed_natural_language_description" | "description" => "narrative",
        other => return other.to_string(),
    }
    .to_string()
}

fn as_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.trim().to_string(),
        Value::Array(items) => items
            .iter()
            .map(as_text)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("; "),
        other => other.to_string(),
    }
}

fn coerce_object(v: &Value) -> Option<ObjectEntry> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(ObjectEntry {
            name: s.trim().to_string(),
            attributes: BTreeMap::new(),
        }),
        Value::Object(map) => {
            let name = map
                .get("name")
                .or_else(|| map.get("object"))
                .map(as_text)
                .filter(|s| !s.is_empty())?;
            let mut attrs = BTreeMap::new();
            let mut other = Vec::new();
            let nested = map.get("attributes").and_then(Value::as_object);
            let flat = map
                .iter()
                .filter(|(k, _)| !matches!(k.as_str(), "name" | "object" | "attributes"));
            for (k, v) in nested.into_iter().flat_map(Map::iter).chain(flat) {
                let val = as_text(v);
                if val.is_empty() {
                    continue;
                }
                let key = k.trim().to_ascii_lowercase();
                if ATTRIBUTE_VOCABULARY.contains(&key.as_str()) && key != "other" {
                    attrs.insert(key, val);
                } else if key == "other" {
                    other.push(val);
                } else {
                    other.push(format!("{k}: {val}"));
                }
            }
            if !other.is_empty() {
                attrs.insert("other".to_string(), other.join("; "));
            }
            Some(ObjectEntry {
                name,
                attributes: attrs,
            })
        }
        _ => None,
    }
}

/// Maps a completion onto an [`ImageProfile`] for `image`.
///
/// Absent optional sections produce warnings. A missing narrative falls back
/// to the overall view so the profile stays valid.
pub fn parse_profile(text: &str, image: &ImageRef) -> Result<ProfileParseReport, StageError> {
    let value = extract_json(text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| StageError::Unparseable("profile completion is not a JSON object".into()))?;
    let fields: BTreeMap<String, &Value> = obj.iter().map(|(k, v)| (normalize_key(k), v)).collect();

    let overall_view = fields.get("overall_view").map(|v| as_text(v)).unwrap_or_default();
    if overall_view.is_empty() {
        return Err(StageError::Unparseable("overall_view missing".into()));
    }
    let mut warnings: Vec<String> = OPTIONAL_KEYS
        .iter()
        .filter(|k| !fields.contains_key(**k))
        .map(|k| format!("missing section: {k}"))
        .collect();

    let get = |k: &str| fields.get(k).map(|v| as_text(v)).unwrap_or_default();
    let objects = match fields.get("objects") {
        Some(Value::Array(items)) => items.iter().filter_map(coerce_object).collect(),
        Some(v @ Value::Object(_)) => coerce_object(v).into_iter().collect(),
        Some(Value::String(s)) if !s.trim().is_empty() => vec![ObjectEntry {
            name: s.trim().to_string(),
            attributes: BTreeMap::new(),
        }],
        _ => Vec::new(),
    };
    let mut narrative = get("narrative");
    if narrative.is_empty() {
        if fields.contains_key("narrative") {
            warnings.push("empty section: narrative".into());
        }
        narrative = overall_view.clone();
    }
    let profile = ImageProfile {
        image: image.clone(),
        overall_view,
        background: get("background"),
        objects,
        interactions: get("interactions"),
        text_content: get("text"),
        atmosphere: get("atmosphere"),
        narrative,
    };
    profile.validate()?;
    Ok(ProfileParseReport {
        profile,
        warnings,
        raw: text.to_string(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExtractOutcome {
    pub profiles: Vec<ImageProfile>,
    pub warnings: Vec<(String, String)>,
    pub quarantine: Vec<QuarantineEntry>,
}

/// Profiles every image through the backend, preserving input order.
/// Failures are quarantined; the call errors only when every image fails.
pub async fn extract_profiles(
    images: &[ImageRef],
    client: &ModelClient,
    store: &ImageStore,
) -> Result<ExtractOutcome, StageError> {
    if images.is_empty() {
        return Err(StageError::Precondition("no images to extract".into()));
    }
    let mut out = ExtractOutcome::default();
    let mut pending = Vec::new();
    let mut requests = Vec::new();
    for image in images {
        match render_extraction_prompt(client, image, store) {
            Ok(r) => {
                pending.push(image);
                requests.push(r);
            }
            Err(e) => out.quarantine.push(QuarantineEntry::new(&image.id, "extract", "", e)),
        }
    }
    if !requests.is_empty() {
        let responses = client.run_batch(requests).await?;
        for (image, resp) in pending.into_iter().zip(responses) {
            let parsed = resp
                .map_err(StageError::from)
                .map(|r| (parse_profile(&r.text, image), r.text));
            match parsed {
                Ok((Ok(report), _)) => {
                    out.warnings
                        .extend(report.warnings.into_iter().map(|w| (image.id.clone(), w)));
                    out.profiles.push(report.profile);
                }
                Ok((Err(e), raw)) => out.quarantine.push(QuarantineEntry::new(&image.id, "extract", raw, e)),
                Err(e) => out.quarantine.push(QuarantineEntry::new(&image.id, "extract", "", e)),
            }
        }
    }
    if out.profiles.is_empty() {
        return Err(StageError::AllFailed {
            stage: "extract".into(),
            count: images.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fixture_store, scripted_client};

    fn img() -> ImageRef {
        ImageRef::new("abc", "a.png")
    }

    #[test]
    fn parses_minimal_profile_with_warnings() {
        let text = r#"{"overall_view":"a park","narrative":"kids play","background":"","text":"","atmosphere":""}"#;
        let r = parse_profile(text, &img()).unwrap();
        assert_eq!(r.profile.overall_view, "a park");
        assert_eq!(
            r.warnings,
            vec![
                "missing section: objects".to_string(),
                "missing section: interactions".to_string()
            ]
        );
    }

    #[test]
    fn fenced_and_plain_agree() {
        let body =
            r#"{"overall_view":"a park","narrative":"n","objects":[{"name":"dog","color":"brown","breed":"lab"}]}"#;
        let a = parse_profile(body, &img()).unwrap();
        let b = parse_profile(&format!("Profile:\n```json\n{body}\n```"), &img()).unwrap();
        assert_eq!(a.profile, b.profile);
        let dog = &a.profile.objects[0];
        assert_eq!(dog.attributes["color"], "brown");
        assert_eq!(dog.attributes["other"], "breed: lab");
    }

    #[test]
    fn overall_view_is_required() {
        assert!(matches!(
            parse_profile(r#"{"background":"x"}"#, &img()),
            Err(StageError::Unparseable(_))
        ));
        assert!(parse_profile("nothing", &img()).is_err());
    }

    #[test]
    fn header_style_keys_are_accepted() {
        let r = parse_profile(
            r#"{"Overall View":"v","Main Objects":["cup"],"Atmosphere&Theme":"calm"}"#,
            &img(),
        )
        .unwrap();
        assert_eq!(r.profile.atmosphere, "calm");
        assert_eq!(r.profile.objects[0].name, "cup");
        assert_eq!(r.profile.narrative, "v");
    }

    #[test]
    fn prompt_shape() {
        let (store, images, _dir) = fixture_store(1);
        let (client, _) = scripted_client(vec![]);
        let r = render_extraction_prompt(&client, &images[0], &store).unwrap();
        let text = r.text();
        for header in [
            "Overall View:",
            "Main Objects:",
            "Secondary Objects and Background:",
            "Object Interactions:",
            "Text:",
            "Atmosphere&Theme:",
            "Detailed Natural Language Description:",
        ] {
            assert!(text.contains(header), "{header}");
        }
        assert_eq!(r.images().count(), 1);
        assert!(r.validate().is_ok());
        let missing = ImageRef::new("zzz", "nope.png");
        assert!(matches!(
            render_extraction_prompt(&client, &missing, &store),
            Err(StageError::Model(_))
        ));
    }

    #[tokio::test]
    async fn batch_extraction_quarantines_failures() {
        let (store, images, _dir) = fixture_store(3);
        let good = |v: &str| format!(r#"{{"overall_view":"{v}","narrative":"{v} story"}}"#);
        let (client, _) = scripted_client(vec![(
            RoleTag::Extract,
            vec![good("one"), "garbled".into(), good("three")],
        )]);
        let out = extract_profiles(&images, &client, &store).await.unwrap();
        assert_eq!(out.profiles.len(), 2);
        assert_eq!(out.quarantine.len(), 1);
        assert_eq!(out.profiles[0].overall_view, "one");
        assert_eq!(out.profiles[1].overall_view, "three");
        assert_eq!(out.quarantine[0].item_id, images[1].id);
        assert_eq!(out.quarantine[0].raw, "garbled");

        let (client, _) = scripted_client(vec![(RoleTag::Extract, vec!["x".into(), "y".into(), "z".into()])]);
        assert!(matches!(
            extract_profiles(&images, &client, &store).await,
            Err(StageError::AllFailed { .. })
        ));
        assert!(matches!(
            extract_profiles(&[], &client, &store).await,
            Err(StageError::Precondition(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn parse_is_pure(s in ".{0,80}") {
            let a = parse_profile(&s, &img());
            let b = parse_profile(&s, &img());
            proptest::prop_assert_eq!(a, b);
        }
    }
}
