use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    /// Trim, lower-case, and collapse internal whitespace.
    Text,
    /// Compare as integers; anything unparseable never matches.
    Count,
}

pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

pub fn answers_match(pred: &str, gt: &str, norm: Normalizer) -> bool {
    match norm {
        Normalizer::Text => normalize_text(pred) == normalize_text(gt),
        Normalizer::Count => match (pred.trim().parse::<i64>(), gt.trim().parse::<i64>()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        },
    }
}

pub fn exact_match<P: AsRef<str>, G: AsRef<str>>(preds: &[P], gts: &[G], norm: Normalizer) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    if gts.is_empty() {
        return Err(Error::arg("exact_match over zero records"));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| answers_match(p.as_ref(), g.as_ref(), norm))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(exact_match(&["a", "b"], &["a", "b"], Normalizer::Text).unwrap(), 1.0);
        assert_eq!(exact_match(&["5"], &["5 "], Normalizer::Text).unwrap(), 1.0);
        assert_eq!(exact_match(&["Forest  Scene"], &["forest scene"], Normalizer::Text).unwrap(), 1.0);
        let p = ["1", "2", "3", "4", "5", "6", "7", "0", "0", "x"];
        let g = ["1", "2", "3", "4", "5", "6", "7", "8", "9", "10"];
        assert!((exact_match(&p, &g, Normalizer::Count).unwrap() - 0.7).abs() < 1e-12);
        assert!(answers_match(" 07", "7", Normalizer::Count));
        assert!(exact_match(&["a"], &["a", "b"], Normalizer::Text).is_err());
    }
}
