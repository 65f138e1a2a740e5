//! Exact streaming sums over ensemble members with grouped jackknife errors.
//!
//! Every per-member scalar is rounded once to a fixed-point integer and
//! added into one of `B` groups (member index mod `B`). Integer addition is
//! associative, so the state is bit-identical for any partition of the
//! members across threads or runs, and merging two disjoint runs reproduces
//! the combined run exactly. Standard errors of any smooth function of the
//! means come from the leave-one-group-out jackknife.

use crate::error::{Error, Result};

/// Fixed-point scale `2^FIXED_SHIFT`.
pub const FIXED_SHIFT: i32 = 56;
/// Per-member values above this magnitude are rejected.
pub const MAX_MEMBER_VALUE: f64 = 1e18;

fn to_fixed(v: f64) -> Option<i128> {
    if !v.is_finite() || v.abs() > MAX_MEMBER_VALUE {
        return None;
    }
    Some((v * 2f64.powi(FIXED_SHIFT)).round() as i128)
}

fn from_fixed(s: i128) -> f64 {
    s as f64 * 2f64.powi(-FIXED_SHIFT)
}

// Validate the whole record before touching the row, so a failed add leaves
// it unchanged.
fn add_fixed(row: &mut [i128], values: &[f64]) -> std::result::Result<(), usize> {
    let mut fixed = Vec::with_capacity(values.len());
    for (k, (&v, s)) in values.iter().zip(row.iter()).enumerate() {
        let f = to_fixed(v).ok_or(k)?;
        s.checked_add(f).ok_or(k)?;
        fixed.push(f);
    }
    for (s, f) in row.iter_mut().zip(fixed) {
        *s += f;
    }
    Ok(())
}

/// Fixed-point sums of the members of one group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupRow {
    count: u64,
    sums: Vec<i128>,
}

impl GroupRow {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            sums: vec![0; width],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Add one member's record; on failure the row is unchanged and the
    /// offending slot is returned.
    pub fn add(&mut self, values: &[f64]) -> std::result::Result<(), usize> {
        assert_eq!(values.len(), self.sums.len(), "record width mismatch");
        add_fixed(&mut self.sums, values)?;
        self.count += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedSums {
    width: usize,
    counts: Vec<u64>,
    sums: Vec<i128>,
}

impl GroupedSums {
    pub fn new(width: usize, groups: usize) -> Self {
        assert!(groups >= 2, "jackknife needs at least two groups");
        Self {
            width,
            counts: vec![0; groups],
            sums: vec![0; width * groups],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn groups(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn group_counts(&self) -> &[u64] {
        &self.counts
    }

    /// Group a member index is assigned to.
    pub fn group_of(&self, member: u64) -> usize {
        (member % self.groups() as u64) as usize
    }

    /// Add one member's record. On failure the state is unchanged and the
    /// offending slot is returned.
    pub fn add(&mut self, member: u64, values: &[f64]) -> std::result::Result<(), usize> {
        assert_eq!(values.len(), self.width, "record width mismatch");
        let g = self.group_of(member);
        let row = &mut self.sums[g * self.width..(g + 1) * self.width];
        add_fixed(row, values)?;
        self.counts[g] += 1;
        Ok(())
    }

    /// Add a single group's accumulated row.
    pub fn add_row(&mut self, group: usize, row: &GroupRow) -> Result<()> {
        if row.sums.len() != self.width || group >= self.groups() {
            return Err(Error::Shape(format!(
                "row of width {} for group {group} does not fit {}x{}",
                row.sums.len(),
                self.width,
                self.groups()
            )));
        }
        for (a, b) in self.sums[group * self.width..(group + 1) * self.width].iter_mut().zip(&row.sums) {
            *a = a
                .checked_add(*b)
                .ok_or_else(|| Error::Data("fixed-point sum overflow".into()))?;
        }
        self.counts[group] += row.count;
        Ok(())
    }

    pub fn merge(&mut self, other: &GroupedSums) -> Result<()> {
        if self.width != other.width || self.groups() != other.groups() {
            return Err(Error::Shape(format!(
                "cannot merge sums of width {}x{} with {}x{}",
                self.width,
                self.groups(),
                other.width,
                other.groups()
            )));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a = a
                .checked_add(*b)
                .ok_or_else(|| Error::Data("fixed-point sum overflow".into()))?;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Little-endian dump: width, groups, counts, then the sums row by row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.counts.len() + 16 * self.sums.len());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        out.extend_from_slice(&(self.groups() as u64).to_le_bytes());
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for s in &self.sums {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("malformed accumulator dump: {what}"));
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(8 * i..8 * i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| bad("truncated header"))
        };
        let width = word(0)? as usize;
        let groups = word(1)? as usize;
        if groups < 2 {
            return Err(bad("fewer than two groups"));
        }
        let expected = width
            .checked_mul(groups)
            .and_then(|n| n.checked_mul(16))
            .and_then(|n| n.checked_add(16 + 8 * groups))
            .ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let counts = (0..groups).map(|g| word(2 + g)).collect::<Result<Vec<_>>>()?;
        let base = 16 + 8 * groups;
        let sums = bytes[base..]
            .chunks_exact(16)
            .map(|b| i128::from_le_bytes(b.try_into().expect("16 bytes")))
            .collect();
        Ok(Self { width, counts, sums })
    }

    /// Means over all members and over each leave-one-group-out replicate.
    pub fn jackknife(&self) -> Result<Jackknife> {
        let total = self.count();
        let groups = self.groups();
        if self.counts.iter().any(|&c| c == 0) || total < 2 {
            return Err(Error::Data(format!(
                "jackknife needs every one of the {groups} groups populated, got {total} members"
            )));
        }
        let mut totals = vec![0i128; self.width];
        for g in 0..groups {
            for (t, s) in totals.iter_mut().zip(&self.sums[g * self.width..]) {
                *t += s;
            }
        }
        let full: Vec<f64> = totals.iter().map(|&t| from_fixed(t) / total as f64).collect();
        let replicates = (0..groups)
            .map(|g| {
                let m = (total - self.counts[g]) as f64;
                totals
                    .iter()
                    .zip(&self.sums[g * self.width..(g + 1) * self.width])
                    .map(|(&t, &s)| from_fixed(t - s) / m)
                    .collect()
            })
            .collect();
        Ok(Jackknife {
            members: total,
            full,
            replicates,
        })
    }
}

/// Full-sample means plus leave-one-group-out replicate means.
#[derive(Debug, Clone)]
pub struct Jackknife {
    members: u64,
    full: Vec<f64>,
    replicates: Vec<Vec<f64>>,
}

/// Point estimates with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
}

impl Jackknife {
    pub fn members(&self) -> u64 {
        self.members
    }

    pub fn means(&self) -> &[f64] {
        &self.full
    }

    /// Evaluate `f` on the full means and every replicate.
    pub fn estimate<F>(&self, f: F) -> Estimates
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let value = f(&self.full);
        let b = self.replicates.len() as f64;
        let reps: Vec<Vec<f64>> = self.replicates.iter().map(|r| f(r)).collect();
        let se = (0..value.len())
            .map(|k| {
                let mean = reps.iter().map(|r| r[k]).sum::<f64>() / b;
                let ss: f64 = reps.iter().map(|r| (r[k] - mean).powi(2)).sum();
                ((b - 1.0) / b * ss).sqrt()
            })
            .collect();
        Estimates { value, se }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn merge_is_exact_and_order_free() {
        let values: Vec<[f64; 2]> = (0..200).map(|i| [(i as f64).sin() * 3.7, 1.0 / (1.0 + i as f64)]).collect();
        let mut all = GroupedSums::new(2, 8);
        for (i, v) in values.iter().enumerate() {
            all.add(i as u64, v).unwrap();
        }
        let mut a = GroupedSums::new(2, 8);
        let mut b = GroupedSums::new(2, 8);
        for (i, v) in values.iter().enumerate().rev() {
            if i % 3 == 0 {
                a.add(i as u64, v).unwrap();
            } else {
                b.add(i as u64, v).unwrap();
            }
        }
        b.merge(&a).unwrap();
        assert_eq!(all, b);
    }

    #[test]
    fn jackknife_of_a_mean_matches_the_textbook_error() {
        let mut sums = GroupedSums::new(1, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        for (i, x) in xs.iter().enumerate() {
            sums.add(i as u64, &[*x]).unwrap();
        }
        let est = sums.jackknife().unwrap().estimate(|m| vec![m[0]]);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((est.value[0] - mean).abs() < 1e-12);
        let se = (var / n).sqrt();
        assert!((est.se[0] / se - 1.0).abs() < 0.3, "{} vs {se}", est.se[0]);
    }

    #[test]
    fn byte_dump_round_trips() {
        let mut sums = GroupedSums::new(3, 4);
        for i in 0..10u64 {
            sums.add(i, &[i as f64, -(i as f64) * 1e10, 0.25]).unwrap();
        }
        let bytes = sums.to_bytes();
        assert_eq!(GroupedSums::from_bytes(&bytes).unwrap(), sums);
        assert!(GroupedSums::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_non_finite_records() {
        let mut sums = GroupedSums::new(2, 2);
        assert_eq!(sums.add(0, &[1.0, f64::NAN]), Err(1));
        assert_eq!(sums.count(), 0);
    }
}
