//! Deterministic rule-based analyzer, used as a test oracle.

use crate::lexicon;
use crate::protocol::{decode_tagged, AnalysisItem, Classification, ProtocolError};

/// Classifies tagged strings with the generator's own category patterns.
pub fn analyze_rule_based<S: AsRef<str>>(tagged: &[S]) -> Result<Vec<AnalysisItem>, ProtocolError> {
    Ok(decode_tagged(tagged)?
        .into_iter()
        .map(|(id, text)| {
            let c = lexicon::classify(&text);
            AnalysisItem {
                id,
                classification: if c.category.is_some() { Classification::Phi } else { Classification::NonPhi },
                category: c.category,
                rationale: c.rationale.to_string(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PhiCategory;

    #[test]
    fn reference_examples() {
        let out = analyze_rule_based(&["<0> Patient name: John Doe </0>", "<1> Age: 24 </1>", "<2> PATIENT NAME </2>"])
            .unwrap();
        assert_eq!(out[0].classification, Classification::Phi);
        assert_eq!(out[0].category, Some(PhiCategory::Name));
        assert_eq!((out[1].id, out[1].classification), (1, Classification::NonPhi));
        assert_eq!((out[2].id, out[2].classification), (2, Classification::NonPhi));
    }

    #[test]
    fn malformed_tag_names_the_element() {
        let err = analyze_rule_based(&["<0> ok </0>", "<1> broken"]).unwrap_err();
        assert!(matches!(err, ProtocolError::MissingTag { position: 1, .. }));
        assert!(err.to_string().contains("<1> broken"));
    }
}
