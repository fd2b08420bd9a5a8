//! Mapping predicted entity strings back onto token spans.

use serde::{Deserialize, Serialize};

use crate::corpus::EntitySpan;
use crate::llm::PredictedEntity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmatchedReason {
    /// No contiguous token run spells the surface.
    SurfaceNotFound,
    /// The category is not one of the corpus labels.
    LabelNotInSet,
    /// Every occurrence overlaps tokens already claimed.
    OverlapConflict,
}

impl UnmatchedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            UnmatchedReason::SurfaceNotFound => "surface-not-found",
            UnmatchedReason::LabelNotInSet => "label-not-in-set",
            UnmatchedReason::OverlapConflict => "overlap-conflict",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentOutcome {
    pub matched: Vec<(PredictedEntity, EntitySpan)>,
    pub unmatched: Vec<(PredictedEntity, UnmatchedReason)>,
}

impl AlignmentOutcome {
    pub fn spans(&self) -> Vec<EntitySpan> {
        self.matched.iter().map(|(_, s)| s.clone()).collect()
    }
}

/// Greedy left-to-right claiming: each prediction, in order, takes the first
/// occurrence of its whitespace-split surface whose tokens are all still
/// unclaimed. Matching is exact and case-sensitive.
pub fn align_entities(tokens: &[String], predictions: &[PredictedEntity], labels: &[String]) -> AlignmentOutcome {
    let mut claimed = vec![false; tokens.len()];
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for p in predictions {
        if !labels.contains(&p.category) {
            unmatched.push((p.clone(), UnmatchedReason::LabelNotInSet));
            continue;
        }
        let needle: Vec<&str> = p.surface.split_whitespace().collect();
        if needle.is_empty() || needle.len() > tokens.len() {
            unmatched.push((p.clone(), UnmatchedReason::SurfaceNotFound));
            continue;
        }
        let mut seen = false;
        let mut hit = None;
        for start in 0..=tokens.len() - needle.len() {
            let end = start + needle.len();
            if !tokens[start..end].iter().zip(&needle).all(|(t, n)| t == n) {
                continue;
            }
            seen = true;
            if claimed[start..end].iter().all(|c| !c) {
                hit = Some((start, end));
                break;
            }
        }
        match hit {
            Some((start, end)) => {
                claimed[start..end].iter_mut().for_each(|c| *c = true);
                matched.push((
                    p.clone(),
                    EntitySpan {
                        start,
                        end,
                        category: p.category.clone(),
                        surface: tokens[start..end].join(" "),
                    },
                ));
            }
            None if seen => unmatched.push((p.clone(), UnmatchedReason::OverlapConflict)),
            None => unmatched.push((p.clone(), UnmatchedReason::SurfaceNotFound)),
        }
    }
    AlignmentOutcome { matched, unmatched }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn pe(s: &str, c: &str) -> PredictedEntity {
        PredictedEntity {
            surface: s.into(),
            category: c.into(),
        }
    }

    fn labels() -> Vec<String> {
        ["PER", "ORG", "LOC", "MISC", "X"].map(String::from).to_vec()
    }

    fn bounds(o: &AlignmentOutcome) -> Vec<(usize, usize, String)> {
        o.matched
            .iter()
            .map(|(_, s)| (s.start, s.end, s.category.clone()))
            .collect()
    }

    #[test]
    fn unique_multi_token_match() {
        let o = align_entities(
            &toks("Nelson Mandela 's island"),
            &[pe("Nelson Mandela", "PER")],
            &labels(),
        );
        assert_eq!(bounds(&o), [(0, 2, "PER".to_string())]);
        assert!(o.unmatched.is_empty());
    }

    #[test]
    fn repeated_surface_claims_next_occurrence() {
        let o = align_entities(
            &toks("smile when u smile"),
            &[pe("smile", "X"), pe("smile", "X")],
            &labels(),
        );
        assert_eq!(bounds(&o), [(0, 1, "X".to_string()), (3, 4, "X".to_string())]);
    }

    #[test]
    fn case_sensitive() {
        let o = align_entities(&toks("South African"), &[pe("south african", "MISC")], &labels());
        assert!(o.matched.is_empty());
        assert_eq!(o.unmatched[0].1, UnmatchedReason::SurfaceNotFound);
    }

    #[test]
    fn unknown_label_and_overlap() {
        let o = align_entities(
            &toks("EU rejects German call"),
            &[
                pe("EU", "GPE"),
                pe("German call", "MISC"),
                pe("German", "MISC"),
                pe("EU", "ORG"),
            ],
            &labels(),
        );
        assert_eq!(bounds(&o), [(2, 4, "MISC".to_string()), (0, 1, "ORG".to_string())]);
        let reasons: Vec<UnmatchedReason> = o.unmatched.iter().map(|u| u.1).collect();
        assert_eq!(
            reasons,
            [UnmatchedReason::LabelNotInSet, UnmatchedReason::OverlapConflict]
        );
    }

    #[test]
    fn surface_longer_than_sentence() {
        let o = align_entities(&toks("EU"), &[pe("EU rejects", "ORG")], &labels());
        assert_eq!(o.unmatched[0].1, UnmatchedReason::SurfaceNotFound);
    }

    proptest! {
        #[test]
        fn claims_are_sound(
            tokens in prop::collection::vec("[ab]", 1..12),
            preds in prop::collection::vec(("[ab]( [ab]){0,2}", 0..3usize), 0..8),
        ) {
            let cats = ["PER", "ORG", "BAD"];
            let preds: Vec<PredictedEntity> = preds.iter().map(|(s, c)| pe(s, cats[*c])).collect();
            let o = align_entities(&tokens, &preds, &labels());
            prop_assert_eq!(o.matched.len() + o.unmatched.len(), preds.len());
            let mut used = vec![false; tokens.len()];
            for (p, s) in &o.matched {
                prop_assert!(labels().contains(&s.category));
                prop_assert_eq!(&tokens[s.start..s.end].join(" "), &p.surface);
                for u in &mut used[s.start..s.end] {
                    prop_assert!(!*u);
                    *u = true;
                }
            }
            let again: Vec<PredictedEntity> = o.matched.iter().map(|(p, _)| p.clone()).collect();
            let o2 = align_entities(&tokens, &again, &labels());
            prop_assert_eq!(o2.spans(), o.spans());
        }
    }
}
