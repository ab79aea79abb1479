use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Dense,
    Sparse,
}

/// One human judgement on the 1 to 6 scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub item_id: String,
    pub system: System,
    pub rater_id: String,
    pub rating: u8,
}

/// Reads `item_id,system,rater_id,rating` CSV with a header row.
pub fn read_ratings_csv(input: impl Read) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let records = rdr.deserialize().collect::<std::result::Result<Vec<RatingRecord>, _>>()?;
    validate(&records)?;
    Ok(records)
}

fn validate(records: &[RatingRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !(1..=6).contains(&r.rating) {
            return Err(Error::Invalid(format!("rating {} for item {} outside 1..=6", r.rating, r.item_id)));
        }
        if !seen.insert((&r.item_id, r.system, &r.rater_id)) {
            return Err(Error::Invalid(format!(
                "rater {} rated item {} for {:?} twice",
                r.rater_id, r.item_id, r.system
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    /// Items with ratings for both systems.
    pub items: usize,
    /// Items missing one of the systems; left out of everything else.
    pub excluded: usize,
    pub dense_mean: f64,
    pub sparse_mean: f64,
    pub dense_wins_pct: f64,
    pub neither_pct: f64,
    pub sparse_wins_pct: f64,
}

fn median(mut xs: Vec<u8>) -> f64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] as f64 + xs[n / 2] as f64) / 2.0
    }
}

/// Median over raters per item and system, then the mean of those medians
/// per system, and per-item win/tie/loss shares. An even number of ratings
/// takes the midpoint of the two middle values.
pub fn aggregate_ratings(records: &[RatingRecord]) -> Result<RatingSummary> {
    validate(records)?;
    let mut by_item: BTreeMap<&str, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for r in records {
        let e = by_item.entry(&r.item_id).or_default();
        match r.system {
            System::Dense => e.0.push(r.rating),
            System::Sparse => e.1.push(r.rating),
        }
    }
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for (_, (d, s)) in by_item {
        if d.is_empty() || s.is_empty() {
            excluded += 1;
        } else {
            pairs.push((median(d), median(s)));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus("no item has ratings for both systems".into()));
    }
    let n = pairs.len() as f64;
    let pct = |f: &dyn Fn(&(f64, f64)) -> bool| 100.0 * pairs.iter().filter(|p| f(p)).count() as f64 / n;
    Ok(RatingSummary {
        items: pairs.len(),
        excluded,
        dense_mean: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        sparse_mean: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        dense_wins_pct: pct(&|p| p.0 > p.1),
        neither_pct: pct(&|p| p.0 == p.1),
        sparse_wins_pct: pct(&|p| p.0 < p.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(item: &str, system: System, rater: &str, rating: u8) -> RatingRecord {
        RatingRecord {
            item_id: item.into(),
            system,
            rater_id: rater.into(),
            rating,
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(vec![5, 3, 4]), 4.0);
        assert_eq!(median(vec![2]), 2.0);
        assert_eq!(median(vec![1, 2, 6, 4]), 3.0);
    }

    #[test]
    fn three_items_split_evenly() {
        use System::*;
        let rs = vec![
            rec("a", Dense, "r", 5),
            rec("a", Sparse, "r", 4),
            rec("b", Dense, "r", 3),
            rec("b", Sparse, "r", 3),
            rec("c", Dense, "r", 4),
            rec("c", Sparse, "r", 5),
        ];
        let s = aggregate_ratings(&rs).unwrap();
        assert_eq!((s.items, s.excluded), (3, 0));
        for p in [s.dense_wins_pct, s.neither_pct, s.sparse_wins_pct] {
            assert!((p - 100.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!((s.dense_mean, s.sparse_mean), (4.0, 4.0));
    }

    #[test]
    fn rejects_bad_records() {
        use System::*;
        assert!(aggregate_ratings(&[rec("a", Dense, "r", 7), rec("a", Sparse, "r", 1)]).is_err());
        assert!(aggregate_ratings(&[rec("a", Dense, "r", 2), rec("a", Dense, "r", 3)]).is_err());
        assert!(matches!(aggregate_ratings(&[rec("a", Dense, "r", 2)]), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn csv_input() {
        let text = "item_id,system,rater_id,rating\n1,dense,x,4\n1,sparse,x,5\n2,dense,x,3\n";
        let rs = read_ratings_csv(text.as_bytes()).unwrap();
        assert_eq!(rs.len(), 3);
        let s = aggregate_ratings(&rs).unwrap();
        assert_eq!((s.items, s.excluded, s.sparse_wins_pct), (1, 1, 100.0));
        assert!(read_ratings_csv("item_id,system,rater_id,rating\n1,medium,x,4\n".as_bytes()).is_err());
        assert!(read_ratings_csv("item_id,system,rater_id,rating\n1,dense,x,0\n".as_bytes()).is_err());
    }
}
