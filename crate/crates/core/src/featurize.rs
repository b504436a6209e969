//! Numeric encoding of a [`MolGraph`]: node matrix `X`, dense edge tensor
//! `E` and hop-distance matrix `A`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chem::{Atom, Bond, BondOrder, Element, MolGraph};
use crate::tensor::Tensor;

pub const NODE_FEATURES: usize = 115;
pub const EDGE_FEATURES: usize = 12;

/// Column offsets inside a node feature row.
pub mod node_col {
    pub const ATOM_TYPE: usize = 0;
    pub const UNKNOWN_ELEMENT: usize = 100;
    pub const HYBRIDIZATION: usize = 101;
    pub const NUM_H: usize = 107;
    pub const DEGREE: usize = 108;
    pub const FORMAL_CHARGE: usize = 109;
    pub const VALENCE: usize = 110;
    pub const GASTEIGER: usize = 111;
    pub const GASTEIGER_H: usize = 112;
    pub const AROMATIC: usize = 113;
    pub const IN_RING: usize = 114;
}

/// Column offsets inside an edge feature fiber.
pub mod edge_col {
    pub const BOND_TYPE: usize = 0;
    pub const STEREO: usize = 4;
    pub const IN_RING: usize = 10;
    pub const CONJUGATED: usize = 11;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hybridization {
    Sp,
    Sp2,
    Sp3,
    Sp3d,
    Sp3d2,
    Unknown,
}

impl Hybridization {
    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeaturizeError {
    #[error("molecule has {atoms} atoms, limit is {max}")]
    TooManyAtoms { atoms: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub distance_cap: usize,
    pub max_atoms: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            distance_cap: 10,
            max_atoms: 100,
        }
    }
}

/// Bumped whenever the feature layout or any derivation rule changes.
const LAYOUT_VERSION: u32 = 1;

impl FeaturizerConfig {
    /// Hex digest identifying the feature layout and this configuration.
    /// Caches written under a different digest are rejected on load.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"compt-featurizer");
        h.update(LAYOUT_VERSION.to_le_bytes());
        h.update((NODE_FEATURES as u64).to_le_bytes());
        h.update((EDGE_FEATURES as u64).to_le_bytes());
        h.update((self.distance_cap as u64).to_le_bytes());
        h.update((self.max_atoms as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Model inputs for one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedGraph {
    /// `[n, 115]`
    pub x: Tensor,
    /// `[n, n, 12]`, zero on the diagonal and at non-bonded pairs.
    pub e: Tensor,
    /// `[n, n]` hop distances, clamped to the distance cap.
    pub a: Tensor,
}

impl FeaturizedGraph {
    pub fn atom_count(&self) -> usize {
        self.x.shape()[0]
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> FeaturizedGraph {
        let n = self.atom_count();
        let mut inv = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let x = Tensor::from_fn([n, NODE_FEATURES], |i| {
            self.x.at(&[inv[i / NODE_FEATURES], i % NODE_FEATURES])
        });
        let e = Tensor::from_fn([n, n, EDGE_FEATURES], |i| {
            let (pair, c) = (i / EDGE_FEATURES, i % EDGE_FEATURES);
            self.e.at(&[inv[pair / n], inv[pair % n], c])
        });
        let a = Tensor::from_fn([n, n], |i| self.a.at(&[inv[i / n], inv[i % n]]));
        FeaturizedGraph { x, e, a }
    }
}

/// Sum of bond valence contributions plus attached hydrogens; aromatic
/// bonds count 1.5.
pub fn atom_valence(a: &Atom, g: &MolGraph) -> f64 {
    let bonds: f64 = g.adjacency[a.index]
        .iter()
        .map(|nb| g.bonds[nb.bond].order.valence_contribution())
        .sum();
    bonds + a.total_h() as f64
}

pub fn hybridization(a: &Atom, g: &MolGraph) -> Hybridization {
    let valence = atom_valence(a, g);
    if matches!(a.element, Element::P | Element::S) {
        if valence == 5.0 {
            return Hybridization::Sp3d;
        }
        if valence == 6.0 {
            return Hybridization::Sp3d2;
        }
    }
    if a.degree + a.total_h() as usize == 0 {
        return Hybridization::Unknown;
    }
    let orders = || g.adjacency[a.index].iter().map(|nb| g.bonds[nb.bond].order);
    let doubles = orders().filter(|&o| o == BondOrder::Double).count();
    let triples = orders().filter(|&o| o == BondOrder::Triple).count();
    if triples > 0 || doubles >= 2 {
        Hybridization::Sp
    } else if doubles == 1 || a.aromatic {
        Hybridization::Sp2
    } else {
        Hybridization::Sp3
    }
}

pub fn atom_features(a: &Atom, g: &MolGraph) -> Vec<f64> {
    use node_col::*;
    let mut v = vec![0.0; NODE_FEATURES];
    let z = a.element.atomic_number() as usize;
    let slot = if (1..=100).contains(&z) { z - 1 } else { UNKNOWN_ELEMENT };
    v[ATOM_TYPE + slot] = 1.0;
    v[HYBRIDIZATION + hybridization(a, g).slot()] = 1.0;
    v[NUM_H] = a.total_h() as f64;
    v[DEGREE] = a.degree as f64;
    v[FORMAL_CHARGE] = a.formal_charge as f64;
    v[VALENCE] = atom_valence(a, g);
    v[AROMATIC] = a.aromatic as u8 as f64;
    v[IN_RING] = a.in_ring as u8 as f64;
    v
}

pub fn bond_features(b: &Bond) -> [f64; EDGE_FEATURES] {
    use edge_col::*;
    let mut v = [0.0; EDGE_FEATURES];
    let t = match b.order {
        BondOrder::Single => 0,
        BondOrder::Double => 1,
        BondOrder::Triple => 2,
        BondOrder::Aromatic => 3,
    };
    v[BOND_TYPE + t] = 1.0;
    v[STEREO] = 1.0;
    v[IN_RING] = b.in_ring as u8 as f64;
    v[CONJUGATED] = b.conjugated as u8 as f64;
    v
}

/// All-pairs hop counts by breadth-first search over adjacency lists.
/// Unreachable pairs and distances above `cap` become `cap`.
pub fn hop_distances(adjacency: &[Vec<usize>], cap: usize) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut out = vec![vec![cap; n]; n];
    let mut queue = VecDeque::new();
    for (s, row) in out.iter_mut().enumerate() {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (r, d) in row.iter_mut().zip(dist) {
            *r = d.min(cap);
        }
    }
    out
}

pub fn shortest_paths(g: &MolGraph, cap: usize) -> Tensor {
    let adjacency: Vec<Vec<usize>> = (0..g.atom_count()).map(|i| g.neighbors(i).collect()).collect();
    let d = hop_distances(&adjacency, cap.max(1));
    let n = g.atom_count();
    Tensor::from_fn([n, n], |i| d[i / n.max(1)][i % n.max(1)] as f64)
}

pub fn build_featurized(g: &MolGraph, config: &FeaturizerConfig) -> Result<FeaturizedGraph, FeaturizeError> {
    let n = g.atom_count();
    if n > config.max_atoms {
        return Err(FeaturizeError::TooManyAtoms {
            atoms: n,
            max: config.max_atoms,
        });
    }
    let mut x = Vec::with_capacity(n * NODE_FEATURES);
    for a in &g.atoms {
        x.extend(atom_features(a, g));
    }
    let mut e = Tensor::zeros([n, n, EDGE_FEATURES]);
    for b in &g.bonds {
        let f = bond_features(b);
        for (u, v) in [(b.src, b.dst), (b.dst, b.src)] {
            let at = (u * n + v) * EDGE_FEATURES;
            e.data_mut()[at..at + EDGE_FEATURES].copy_from_slice(&f);
        }
    }
    Ok(FeaturizedGraph {
        x: Tensor::new([n, NODE_FEATURES], x).expect("row width"),
        e,
        a: shortest_paths(g, config.distance_cap),
    })
}
