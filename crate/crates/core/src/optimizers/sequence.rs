use rand::Rng as _;

use super::latent::metropolis;
use super::{check_finite, Budget, SequenceModel, StopReason, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn check_seed(x0: &str, symbols: &[char]) -> Result<Vec<char>> {
    let chars: Vec<char> = x0.chars().collect();
    if chars.is_empty() {
        return Err(Error::Data("empty seed sequence".into()));
    }
    if symbols.len() < 2 {
        return Err(Error::Config("mutation alphabet needs at least 2 symbols".into()));
    }
    if let Some(&c) = chars.iter().find(|c| !symbols.contains(c)) {
        return Err(Error::Data(format!("seed symbol `{c}` is outside the mutation alphabet")));
    }
    Ok(chars)
}

/// Metropolis sampling over sequences; each proposal substitutes one
/// uniformly chosen position with a different uniformly chosen symbol.
pub fn mcmc_sequence(
    x0: &str,
    model: &dyn SequenceModel,
    symbols: &[char],
    kt: f64,
    budget: Budget,
    rng: &mut Rng,
    seed_id: usize,
) -> Result<Trajectory> {
    if !(kt > 0.0) {
        return Err(Error::Config("sequence MCMC needs kT > 0".into()));
    }
    let mut x = check_seed(x0, symbols)?;
    let mut t = Trajectory::new("mcmc-seq", seed_id, &[("kt", kt)], budget);
    if !t.budget.try_spend(1) {
        return Err(Error::Config("budget is zero".into()));
    }
    let mut y = model.predict_sequences(&[x0.to_string()])?[0];
    t.record(None, x0.to_string(), y);
    while t.budget.try_spend(1) {
        let pos = rng.random_range(0..x.len());
        let others: Vec<char> = symbols.iter().copied().filter(|&c| c != x[pos]).collect();
        let mut cand = x.clone();
        cand[pos] = others[rng.random_range(0..others.len())];
        let s: String = cand.iter().collect();
        let yc = model.predict_sequences(std::slice::from_ref(&s))?[0];
        check_finite(&[yc], "sequence MCMC prediction")?;
        if metropolis(yc - y, kt, rng) {
            x = cand;
            y = yc;
            t.record(None, s, y);
        }
    }
    t.stop = StopReason::BudgetExhausted;
    Ok(t)
}

/// Positionwise greedy search: for each position in `order`, scores every
/// symbol (current one included) and keeps the best, ties to the earliest
/// symbol. A position that does not fit in the remaining budget is skipped
/// and the run stops.
pub fn directed_evolution(
    x0: &str,
    model: &dyn SequenceModel,
    symbols: &[char],
    order: Option<&[usize]>,
    budget: Budget,
    seed_id: usize,
) -> Result<Trajectory> {
    let mut x = check_seed(x0, symbols)?;
    let default: Vec<usize> = (0..x.len()).collect();
    let order = order.unwrap_or(&default);
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != default {
        return Err(Error::Config("position order must be a permutation of the sequence positions".into()));
    }
    let mut t = Trajectory::new("de", seed_id, &[("n_symbols", symbols.len() as f64)], budget);
    let mut y = f64::NAN;
    for &pos in order {
        if !t.budget.try_spend(symbols.len()) {
            t.stop = StopReason::PartialPosition;
            break;
        }
        let cands: Vec<String> = symbols
            .iter()
            .map(|&c| {
                let mut v = x.clone();
                v[pos] = c;
                v.into_iter().collect()
            })
            .collect();
        let ys = model.predict_sequences(&cands)?;
        check_finite(&ys, "directed evolution prediction")?;
        let best = (0..ys.len()).fold(0, |b, i| if ys[i] > ys[b] { i } else { b });
        x[pos] = symbols[best];
        y = ys[best];
        t.record(None, cands[best].clone(), y);
    }
    if t.steps.is_empty() {
        // Nothing fit in the budget: the seed itself is the result, unscored.
        t.record(None, x0.to_string(), y);
    }
    Ok(t)
}
