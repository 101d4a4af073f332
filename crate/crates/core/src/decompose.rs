//! Rule-based query decomposition over the closed template grammar.
//!
//! A compositional question is a relation frame whose subject slot holds the
//! placeholder phrase for the depicted entity. It splits into the identity
//! question for the image and the relation question with the placeholder
//! tagged by `[` `]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::QueryType;
use crate::world::{EntityKind, ImageSpec, Query, FRAMES_PER_RELATION, RELATIONS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSubquery {
    pub image: ImageSpec,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedQuery {
    pub qtype: QueryType,
    pub image_subquery: Option<ImageSubquery>,
    /// Words of the relation question; a compositional query carries the
    /// placeholder wrapped in `[` `]`.
    pub text_subquery: Option<Vec<String>>,
    /// Word range `[start, end)` of the bracketed placeholder, brackets included.
    pub placeholder_span: Option<(usize, usize)>,
    /// Relation the text subquery asks about, when there is one.
    pub relation: Option<usize>,
}

impl DecomposedQuery {
    pub fn text_question(&self) -> Option<String> {
        self.text_subquery.as_ref().map(|w| w.join(" "))
    }

    /// The text subquery with the placeholder replaced by `entity`.
    pub fn substitute(&self, entity: &str) -> Result<String> {
        let (Some(words), Some((a, b))) = (&self.text_subquery, self.placeholder_span) else {
            return Err(Error::Precondition("text subquery has no placeholder".into()));
        };
        let mut out: Vec<&str> = words[..a].iter().map(String::as_str).collect();
        out.push(entity);
        out.extend(words[b..].iter().map(String::as_str));
        Ok(out.join(" "))
    }
}

fn words(s: &str) -> Vec<String> {
    s.replace('?', " ? ")
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect()
}

/// Matches `q` against the relation frames; returns (relation, frame, slot words).
fn match_relation(q: &[String]) -> Option<(usize, usize, Vec<String>)> {
    for (r, spec) in RELATIONS.iter().enumerate() {
        for (f, frame) in spec.frames.iter().enumerate() {
            let fw = words(frame);
            let slot = fw.iter().position(|w| w == "{s}").expect("frame has a slot");
            let (pre, post) = (&fw[..slot], &fw[slot + 1..]);
            if q.len() > pre.len() + post.len() && q.starts_with(pre) && q.ends_with(post) {
                return Some((r, f, q[pre.len()..q.len() - post.len()].to_vec()));
            }
        }
    }
    None
}

fn match_visual(q: &[String]) -> Option<EntityKind> {
    [EntityKind::Person, EntityKind::Club]
        .into_iter()
        .find(|k| k.visual_frames().iter().any(|f| words(f) == q))
}

pub fn decompose(q: &Query) -> Result<DecomposedQuery> {
    let qw = words(&q.question);
    if match_visual(&qw).is_some() {
        let image = q
            .image
            .ok_or_else(|| Error::Decomposition(format!("visual question without an image: {:?}", q.question)))?;
        return Ok(DecomposedQuery {
            qtype: QueryType::Visual,
            image_subquery: Some(ImageSubquery {
                image,
                question: qw.join(" "),
            }),
            text_subquery: None,
            placeholder_span: None,
            relation: None,
        });
    }
    let Some((relation, frame, slot)) = match_relation(&qw) else {
        return Err(Error::Decomposition(format!("unrecognized template: {:?}", q.question)));
    };
    debug_assert!(frame < FRAMES_PER_RELATION);
    let kind = RELATIONS[relation].subject;
    let placeholder = words(kind.placeholder().expect("subject kind"));
    if slot == placeholder {
        let image = q
            .image
            .ok_or_else(|| Error::Decomposition(format!("placeholder without an image: {:?}", q.question)))?;
        let start = words(RELATIONS[relation].frames[frame])
            .iter()
            .position(|w| w == "{s}")
            .expect("frame has a slot");
        let mut text = qw[..start].to_vec();
        text.push("[".into());
        text.extend(slot.iter().cloned());
        text.push("]".into());
        let end = text.len();
        text.extend(qw[start + slot.len()..].iter().cloned());
        return Ok(DecomposedQuery {
            qtype: QueryType::Compositional,
            image_subquery: Some(ImageSubquery {
                image,
                question: kind.visual_frames()[0].to_string(),
            }),
            text_subquery: Some(text),
            placeholder_span: Some((start, end)),
            relation: Some(relation),
        });
    }
    if slot.len() != 1 || slot[0] == "[" {
        return Err(Error::Decomposition(format!("subject slot is not one entity: {:?}", q.question)));
    }
    Ok(DecomposedQuery {
        qtype: QueryType::Textual,
        image_subquery: None,
        text_subquery: Some(qw),
        placeholder_span: None,
        relation: Some(relation),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(image: bool, text: &str) -> Query {
        Query {
            qtype: QueryType::Textual,
            image: image.then_some(ImageSpec { entity: 1, variant: 0 }),
            question: text.into(),
        }
    }

    #[test]
    fn person_position_example() {
        let d = decompose(&q(true, "What position did the person in the photo recently assume?")).unwrap();
        assert_eq!(d.qtype, QueryType::Compositional);
        assert_eq!(d.image_subquery.as_ref().unwrap().question, "who is in the photo ?");
        assert_eq!(
            d.text_question().unwrap(),
            "what position did [ the person in the photo ] recently assume ?"
        );
        let (a, b) = d.placeholder_span.unwrap();
        assert_eq!(d.text_subquery.as_ref().unwrap()[a], "[");
        assert_eq!(d.text_subquery.as_ref().unwrap()[b - 1], "]");
        assert_eq!(d.substitute("tramo").unwrap(), "what position did tramo recently assume ?");
    }

    #[test]
    fn club_league_example() {
        let d = decompose(&q(true, "Which league is associated with the club in the picture?")).unwrap();
        assert_eq!(d.qtype, QueryType::Compositional);
        assert_eq!(d.image_subquery.unwrap().question, "what club is in the picture ?");
        assert_eq!(
            d.text_subquery.unwrap().join(" "),
            "which league is associated with [ the club in the picture ] ?"
        );
    }

    #[test]
    fn visual_only_has_no_text_level() {
        let d = decompose(&q(true, "Who is in the photo?")).unwrap();
        assert_eq!(d.qtype, QueryType::Visual);
        assert!(d.text_subquery.is_none() && d.placeholder_span.is_none());
        let again = decompose(&Query {
            qtype: QueryType::Visual,
            image: Some(d.image_subquery.as_ref().unwrap().image),
            question: d.image_subquery.as_ref().unwrap().question.clone(),
        })
        .unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn textual_and_failures() {
        let d = decompose(&q(false, "who coaches zumaro ?")).unwrap();
        assert_eq!(d.qtype, QueryType::Textual);
        assert!(d.placeholder_span.is_none());
        assert!(matches!(d.substitute("x"), Err(Error::Precondition(_))));
        assert!(matches!(decompose(&q(false, "how tall is zumaro ?")), Err(Error::Decomposition(_))));
        assert!(matches!(decompose(&q(false, "who is in the photo ?")), Err(Error::Decomposition(_))));
        assert!(matches!(
            decompose(&q(false, "who coaches the club in the picture ?")),
            Err(Error::Decomposition(_))
        ));
    }
}
