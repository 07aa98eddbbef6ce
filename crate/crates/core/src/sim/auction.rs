use serde::{Deserialize, Serialize};

use super::SimError;
use crate::money::MicroCpm;

/// Result of one second-price auction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    /// Index into the bid list.
    pub winner: usize,
    pub winning_bid: MicroCpm,
    pub charge: MicroCpm,
}

/// Highest bid wins (earliest on ties) and pays the highest of the other
/// bids.
pub fn run_auction<S>(bids: &[(S, MicroCpm)]) -> Result<AuctionOutcome, SimError> {
    if bids.len() < 2 {
        return Err(SimError::TooFewBids(bids.len()));
    }
    if let Some((_, b)) = bids.iter().find(|(_, b)| !b.is_positive()) {
        return Err(SimError::NonPositiveBid(*b));
    }
    let mut winner = 0;
    for (i, (_, b)) in bids.iter().enumerate().skip(1) {
        if *b > bids[winner].1 {
            winner = i;
        }
    }
    let charge =
        bids.iter().enumerate().filter(|&(i, _)| i != winner).map(|(_, (_, b))| *b).max().expect("at least two bids");
    Ok(AuctionOutcome { winner, winning_bid: bids[winner].1, charge })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(cpm: f64) -> MicroCpm {
        MicroCpm::from_cpm_f64(cpm)
    }

    #[test]
    fn charge_is_second_price() {
        let out = run_auction(&[("A", m(0.99)), ("B", m(0.95))]).unwrap();
        assert_eq!((out.winner, out.charge), (0, m(0.95)));
        let out = run_auction(&[("A", m(0.5)), ("B", m(2.0)), ("C", m(1.1))]).unwrap();
        assert_eq!((out.winner, out.winning_bid, out.charge), (1, m(2.0), m(1.1)));
    }

    #[test]
    fn ties_go_to_earliest() {
        let out = run_auction(&[("A", m(1.0)), ("B", m(1.0))]).unwrap();
        assert_eq!((out.winner, out.charge), (0, m(1.0)));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(run_auction(&[("A", m(1.0))]), Err(SimError::TooFewBids(1))));
        assert!(matches!(run_auction::<&str>(&[]), Err(SimError::TooFewBids(0))));
        assert!(matches!(run_auction(&[("A", m(1.0)), ("B", MicroCpm::ZERO)]), Err(SimError::NonPositiveBid(_))));
    }

    fn permutations(v: &[i64]) -> Vec<Vec<i64>> {
        if v.len() <= 1 {
            return vec![v.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..v.len() {
            let mut rest = v.to_vec();
            let x = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_sort_oracle_under_permutation(bids in proptest::collection::vec(1i64..50, 2..=6)) {
            let mut sorted = bids.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            for p in permutations(&bids) {
                let list: Vec<((), MicroCpm)> = p.iter().map(|&b| ((), MicroCpm::from_micros(b))).collect();
                let out = run_auction(&list).unwrap();
                prop_assert_eq!(out.winning_bid.micros(), sorted[0]);
                prop_assert_eq!(out.charge.micros(), sorted[1]);
                prop_assert!(out.charge <= out.winning_bid);
                let first_max = p.iter().position(|&b| b == sorted[0]).unwrap();
                prop_assert_eq!(out.winner, first_max);
            }
        }
    }
}
