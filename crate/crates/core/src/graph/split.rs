use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitPolicy {
    /// 20 training nodes per class, then 500 validation and 1000 test
    /// nodes drawn from the rest.
    PlanetoidStandard,
    /// `floor(p_train·n)` train, `floor(p_val·n)` validation, remainder test.
    Fractional { train: f64, val: f64 },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Fractional { train: 0.6, val: 0.2 }
    }
}

/// Disjoint train/validation/test node sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn from_indices(n: usize, train: &[usize], val: &[usize], test: &[usize]) -> Result<Self> {
        let mut m = Masks {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        for (mask, idx) in [(&mut m.train, train), (&mut m.val, val), (&mut m.test, test)] {
            for &i in idx {
                if i >= n {
                    return Err(Error::invalid(format!("mask index {i} out of range {n}")));
                }
                mask[i] = true;
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.train.len();
        if self.val.len() != n || self.test.len() != n {
            return Err(Error::invalid("masks have different lengths"));
        }
        for i in 0..n {
            if [self.train[i], self.val[i], self.test[i]].iter().filter(|&&b| b).count() > 1 {
                return Err(Error::invalid(format!("node {i} is in more than one split")));
            }
        }
        for (name, mask) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if !mask.iter().any(|&b| b) {
                return Err(Error::invalid(format!("{name} split is empty")));
            }
        }
        Ok(())
    }

    pub fn train_indices(&self) -> Vec<usize> {
        indices(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        indices(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        indices(&self.test)
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (c(&self.train), c(&self.val), c(&self.test))
    }
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

pub fn split_masks(g: &Graph, policy: SplitPolicy, seed: u64) -> Result<Masks> {
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match policy {
        SplitPolicy::PlanetoidStandard => {
            const PER_CLASS: usize = 20;
            const N_VAL: usize = 500;
            const N_TEST: usize = 1000;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.n_classes()];
            for (i, &y) in g.labels().iter().enumerate() {
                by_class[y].push(i);
            }
            let mut train = Vec::new();
            let mut taken = vec![false; n];
            for (c, members) in by_class.iter_mut().enumerate() {
                if members.len() < PER_CLASS {
                    return Err(Error::Infeasible(format!(
                        "class {} has {} nodes, planetoid split needs {PER_CLASS}",
                        g.class_names()[c],
                        members.len()
                    )));
                }
                members.shuffle(&mut rng);
                for &i in &members[..PER_CLASS] {
                    taken[i] = true;
                    train.push(i);
                }
            }
            let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            if rest.len() < N_VAL + N_TEST {
                return Err(Error::Infeasible(format!(
                    "{} nodes remain after training selection, planetoid split needs {}",
                    rest.len(),
                    N_VAL + N_TEST
                )));
            }
            rest.shuffle(&mut rng);
            Masks::from_indices(n, &train, &rest[..N_VAL], &rest[N_VAL..N_VAL + N_TEST])
        }
        SplitPolicy::Fractional { train, val } => {
            if !(train >= 0.0 && val >= 0.0 && train + val <= 1.0) {
                return Err(Error::invalid(format!(
                    "split fractions train={train}, val={val} must be nonnegative and sum to at most 1"
                )));
            }
            let n_train = (train * n as f64).floor() as usize;
            let n_val = (val * n as f64).floor() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            Masks::from_indices(
                n,
                &order[..n_train],
                &order[n_train..n_train + n_val],
                &order[n_train + n_val..],
            )
        }
    }
}
