use crate::error::{Error, Result};

/// Number of positions at which two equal-length sequences differ.
pub fn hamming(a: &str, b: &str) -> Result<usize> {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    hamming_slices(&a, &b)
}

pub fn hamming_slices<T: PartialEq>(a: &[T], b: &[T]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("hamming: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Every sequence exactly one substitution away from `seed`, drawing
/// replacements from `symbols`. Output order: position-major, then symbol order.
pub fn enumerate_single_mutants(seed: &str, symbols: &[char]) -> Result<Vec<String>> {
    let chars: Vec<char> = seed.chars().collect();
    if let Some(c) = chars.iter().find(|c| !symbols.contains(c)) {
        return Err(Error::Data(format!("seed symbol {c:?} not in alphabet")));
    }
    let mut distinct: Vec<char> = Vec::with_capacity(symbols.len());
    for &s in symbols {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    let mut out = Vec::with_capacity(chars.len() * distinct.len().saturating_sub(1));
    let mut buf = chars.clone();
    for pos in 0..chars.len() {
        for &s in &distinct {
            if s == chars[pos] {
                continue;
            }
            buf[pos] = s;
            out.push(buf.iter().collect());
        }
        buf[pos] = chars[pos];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;
    use crate::seqdata::AMINO_ACIDS;

    #[test]
    fn hamming_basics() {
        assert_eq!(hamming("AAAA", "AAAA").unwrap(), 0);
        assert_eq!(hamming("AAAA", "AAAC").unwrap(), 1);
        assert!(hamming("AAA", "AAAA").is_err());
    }

    #[test]
    fn tiny_exhaustive_case() {
        let got: HashSet<String> = enumerate_single_mutants("AA", &['A', 'C']).unwrap().into_iter().collect();
        assert_eq!(got, HashSet::from(["CA".to_string(), "AC".to_string()]));
    }

    #[test]
    fn count_is_nineteen_per_position() {
        let seed = "ACDEFGHIKL";
        let out = enumerate_single_mutants(seed, &AMINO_ACIDS).unwrap();
        assert_eq!(out.len(), 19 * seed.len());
        let unique: HashSet<&String> = out.iter().collect();
        assert_eq!(unique.len(), out.len());
        assert!(!out.iter().any(|s| s == seed));
    }

    proptest! {
        #[test]
        fn hamming_matches_positionwise_loop(a in "[ACDE]{1,16}", seed in any::<u64>()) {
            // Positionwise loop oracle over a perturbed copy.
            let mut b: Vec<char> = a.chars().collect();
            let mut x = seed;
            for c in b.iter_mut() {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if x >> 62 == 0 { *c = 'Y'; }
            }
            let b: String = b.into_iter().collect();
            let mut expected = 0;
            let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            for i in 0..ac.len() {
                if ac[i] != bc[i] { expected += 1; }
            }
            prop_assert_eq!(hamming(&a, &b).unwrap(), expected);
        }

        #[test]
        fn every_mutant_is_one_step_away(seed in "[ACDEFGHIKLMNPQRSTVWY]{1,10}") {
            let out = enumerate_single_mutants(&seed, &AMINO_ACIDS).unwrap();
            prop_assert_eq!(out.len(), 19 * seed.len());
            for m in &out {
                prop_assert_eq!(hamming(&seed, m).unwrap(), 1);
            }
        }
    }
}
