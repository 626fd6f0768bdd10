//! Language guidance: per-finger contact compilation and deterministic
//! template rendering.
//!
//! Guidance for a grasp is produced in two stages, mirroring a
//! coarse-to-fine annotation flow: a brief clause derived from the verb
//! and object category, then a fine-grained clause rendered from the
//! per-finger contact information. Fingertips act as contact anchors; a
//! finger touches a part when its tip is strictly within 1 cm of that
//! part's surface (signed, so penetrating tips count as touching).

use crate::error::{Error, Result};
use crate::hand::{GraspPose, HandModel, FINGER_NAMES};
use crate::object::{category_display, ObjectModel};

/// Closed verb vocabulary.
pub const VERBS: [&str; 6] = ["hold", "use", "lift", "pour", "press", "hand-over"];

/// Strict contact threshold, meters.
pub const CONTACT_THRESHOLD: f64 = 0.01;

/// Surface forms per (verb, pattern) bank.
pub const STYLES_PER_VERB: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub verb: String,
    /// Contact part per finger (hand finger order); `None` = no contact.
    pub finger_parts: Vec<Option<String>>,
    pub brief: String,
    pub text: String,
}

impl GuidanceSpec {
    /// Group key: verb plus the exact per-finger part assignment.
    pub fn intent_key(&self) -> String {
        let parts: Vec<&str> = self
            .finger_parts
            .iter()
            .map(|p| p.as_deref().unwrap_or("-"))
            .collect();
        format!("{}|{}", self.verb, parts.join(","))
    }

    pub fn validate(&self, obj: &ObjectModel) -> Result<()> {
        if !VERBS.contains(&self.verb.as_str()) {
            return Err(Error::Contract(format!("verb '{}' not in vocabulary", self.verb)));
        }
        for p in self.finger_parts.iter().flatten() {
            if obj.part_id(p).is_none() {
                return Err(Error::Contract(format!(
                    "assigned part '{p}' does not exist on object '{}'",
                    obj.id
                )));
            }
        }
        if !self.text.starts_with(&self.brief) {
            return Err(Error::Contract("rendered text must start with the brief text".into()));
        }
        Ok(())
    }
}

/// Intended per-finger part assignments for each verb a category supports,
/// in hand finger order (thumb, forefinger, middle, ring).
pub fn intent_table(category: &str) -> Vec<(&'static str, [&'static str; 4])> {
    match category {
        "bottle" => vec![
            ("hold", ["body"; 4]),
            ("lift", ["body"; 4]),
            ("pour", ["body"; 4]),
            ("press", ["body", "cap", "body", "body"]),
            ("hand-over", ["body"; 4]),
        ],
        "sprayer" => vec![
            ("use", ["body", "trigger", "body", "body"]),
            ("hold", ["body"; 4]),
            ("hand-over", ["body"; 4]),
        ],
        "mug" => vec![
            ("use", ["body", "handle", "body", "body"]),
            ("hold", ["body"; 4]),
            ("hand-over", ["body"; 4]),
        ],
        "pan" => vec![
            ("hold", ["handle"; 4]),
            ("lift", ["handle"; 4]),
            ("hand-over", ["handle"; 4]),
        ],
        _ => Vec::new(),
    }
}

fn verb_display(verb: &str) -> &str {
    match verb {
        "hand-over" => "hand over",
        v => v,
    }
}

pub fn brief_text(verb: &str, category: &str) -> String {
    format!("To {} a {}", verb_display(verb), category_display(category))
}

/// Contact part of a single anchor point: the part with the smallest
/// signed distance, if strictly below the threshold.
pub fn contact_part_of_point(obj: &ObjectModel, p: [f64; 3], threshold: f64) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for pid in 0..obj.part_names().len() as u32 {
        let d = obj.part_sdf(pid, p);
        if d < threshold {
            match best {
                Some((_, bd)) if bd <= d => {}
                _ => best = Some((pid, d)),
            }
        }
    }
    best.map(|(pid, _)| pid)
}

/// Per-finger contact parts of a pose.
pub fn contact_parts(
    hand: &HandModel,
    obj: &ObjectModel,
    pose: &GraspPose,
) -> Result<Vec<Option<u32>>> {
    let cloud = hand.forward_kinematics(pose)?;
    Ok(cloud
        .fingertips
        .iter()
        .map(|tip| contact_part_of_point(obj, *tip, CONTACT_THRESHOLD))
        .collect())
}

fn finger_name(i: usize) -> &'static str {
    FINGER_NAMES.get(i).copied().unwrap_or("finger")
}

/// Render per-finger contact info into descriptor text, e.g.
/// "forefinger touches trigger. other fingers touch body."
pub fn descriptor(obj: &ObjectModel, parts: &[Option<u32>]) -> String {
    let name = |p: &Option<u32>| -> Option<&str> {
        p.map(|pid| obj.part_names()[pid as usize].as_str())
    };
    if parts.iter().all(|p| p.is_none()) {
        return "no fingers touch the object.".to_string();
    }
    let first = name(&parts[0]);
    if parts.iter().all(|p| name(p) == first) {
        return format!("all fingers touch {}.", first.unwrap());
    }
    // a single odd finger against a uniform rest reads as "other fingers"
    for (i, p) in parts.iter().enumerate() {
        let rest: Vec<Option<&str>> =
            parts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| name(q)).collect();
        if rest.iter().all(|r| *r == rest[0] && r.is_some()) && name(p) != rest[0] {
            let own = match name(p) {
                Some(n) => format!("{} touches {n}.", finger_name(i)),
                None => format!("{} touches nothing.", finger_name(i)),
            };
            return format!("{own} other fingers touch {}.", rest[0].unwrap());
        }
    }
    parts
        .iter()
        .enumerate()
        .map(|(i, p)| match name(p) {
            Some(n) => format!("{} touches {n}.", finger_name(i)),
            None => format!("{} touches nothing.", finger_name(i)),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

enum Pattern<'a> {
    /// All fingers on one part.
    Uniform(&'a str),
    /// Forefinger on its own part, all other fingers sharing one part.
    ForeSplit { fore: &'a str, other: &'a str },
    Mixed,
}

fn pattern<'a>(obj: &'a ObjectModel, parts: &[Option<u32>]) -> Pattern<'a> {
    let name = |p: &Option<u32>| -> Option<&'a str> {
        p.map(|pid| obj.part_names()[pid as usize].as_str())
    };
    if parts.is_empty() || parts.iter().any(|p| p.is_none()) {
        return Pattern::Mixed;
    }
    let first = name(&parts[0]);
    if parts.iter().all(|p| name(p) == first) {
        return Pattern::Uniform(first.unwrap());
    }
    if parts.len() >= 2 {
        let fore = name(&parts[1]);
        let others: Vec<Option<&str>> = parts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, p)| name(p))
            .collect();
        if others.iter().all(|o| *o == others[0]) && fore != others[0] {
            return Pattern::ForeSplit { fore: fore.unwrap(), other: others[0].unwrap() };
        }
    }
    Pattern::Mixed
}

/// Action clause appended to the brief text; `style` selects one of the
/// surface forms deterministically.
fn action_clause(verb: &str, pat: &Pattern, desc: &str, style: usize) -> String {
    let s = style % STYLES_PER_VERB;
    match pat {
        Pattern::Uniform(all) => {
            let forms: [String; 3] = match verb {
                "hold" => [
                    format!(", hold the {all} firmly with all fingers."),
                    format!(", wrap your fingers around the {all}."),
                    format!(", grip the {all} with your whole hand."),
                ],
                "use" => [
                    format!(", grip the {all} with all fingers and operate it."),
                    format!(", take the {all} in your hand and put it to work."),
                    format!(", close your fingers on the {all} to use it."),
                ],
                "lift" => [
                    format!(", grasp the {all} and raise it steadily."),
                    format!(", close your fingers around the {all} and lift."),
                    format!(", take hold of the {all} and pick it up."),
                ],
                "pour" => [
                    format!(", grasp the {all} and tilt it to pour."),
                    format!(", hold the {all} securely while tipping it."),
                    format!(", wrap your fingers around the {all} and tilt slowly."),
                ],
                "press" => [
                    format!(", press down on the {all} with your whole grip."),
                    format!(", squeeze the {all} evenly with every finger."),
                    format!(", apply pressure on the {all} with your hand."),
                ],
                _ => [
                    format!(", hold the {all} out with all fingers so it can be taken."),
                    format!(", offer the {all} forward in an open, stable grip."),
                    format!(", present the {all} while keeping every finger on it."),
                ],
            };
            forms[s].clone()
        }
        Pattern::ForeSplit { fore, other } => {
            let forms: [String; 3] = match verb {
                "use" => [
                    format!(", press the {fore} with your forefinger and hold the {other} with your other fingers."),
                    format!(", put your forefinger on the {fore} and wrap the remaining fingers around the {other}."),
                    format!(", squeeze the {fore} with your forefinger while gripping the {other}."),
                ],
                "press" => [
                    format!(", push down on the {fore} with your forefinger and steady the {other} with the rest."),
                    format!(", press the {fore} using your forefinger while the other fingers hold the {other}."),
                    format!(", keep your forefinger on the {fore} and clamp the {other} with the others."),
                ],
                "pour" => [
                    format!(", hook your forefinger on the {fore} and steady the {other} while tilting."),
                    format!(", keep your forefinger at the {fore} and cradle the {other} as you pour."),
                    format!(", guide the {fore} with your forefinger and support the {other} to pour."),
                ],
                _ => [
                    format!(", place your forefinger on the {fore} and the other fingers on the {other}."),
                    format!(", rest your forefinger on the {fore} while the rest hold the {other}."),
                    format!(", set your forefinger against the {fore} and grip the {other} with the others."),
                ],
            };
            forms[s].clone()
        }
        Pattern::Mixed => {
            let forms: [String; 3] = [
                format!(", placing your fingers so that {desc}"),
                format!(", arranging your grip so that {desc}"),
                format!(", with finger contacts as follows: {desc}"),
            ];
            forms[s].clone()
        }
    }
}

/// Compile per-finger contact info from a pose and render guidance text.
/// `style` picks one of the deterministic surface forms per verb.
pub fn annotate_guidance(
    obj: &ObjectModel,
    pose: &GraspPose,
    hand: &HandModel,
    verb: &str,
    style: usize,
) -> Result<GuidanceSpec> {
    if !VERBS.contains(&verb) {
        return Err(Error::Contract(format!("verb '{verb}' not in vocabulary")));
    }
    let parts = contact_parts(hand, obj, pose)?;
    let desc = descriptor(obj, &parts);
    let pat = pattern(obj, &parts);
    let brief = brief_text(verb, &obj.category);
    let text = format!("{brief}{}", action_clause(verb, &pat, &desc, style));
    let spec = GuidanceSpec {
        verb: verb.to_string(),
        finger_parts: parts
            .iter()
            .map(|p| p.map(|pid| obj.part_names()[pid as usize].clone()))
            .collect(),
        brief,
        text,
    };
    spec.validate(obj)?;
    Ok(spec)
}
