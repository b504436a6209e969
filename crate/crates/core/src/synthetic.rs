//! Random molecular graphs for checks and probes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::chem::{perceive_rings, Atom, Bond, BondOrder, Element, MolGraph};

fn atom(element: Element) -> Atom {
    Atom {
        element,
        aromatic: false,
        formal_charge: 0,
        explicit_h: None,
        implicit_h: 0,
        in_ring: false,
        degree: 0,
        index: 0,
    }
}

fn single(src: usize, dst: usize) -> Bond {
    Bond {
        src,
        dst,
        order: BondOrder::Single,
        in_ring: false,
        conjugated: false,
    }
}

fn finish(atoms: Vec<Atom>, bonds: Vec<Bond>) -> MolGraph {
    let mut g = MolGraph::from_parts(atoms, bonds);
    for a in g.atoms.iter_mut() {
        let valence = a.element.default_valences()[0] as usize;
        a.implicit_h = valence.saturating_sub(a.degree) as u32;
    }
    perceive_rings(&mut g);
    g
}

/// A uniformly attached random tree of `n` saturated carbons.
pub fn random_tree<R: Rng>(n: usize, rng: &mut R) -> MolGraph {
    let atoms = vec![atom(Element::C); n];
    let mut degree = vec![0usize; n];
    let mut bonds = Vec::with_capacity(n.saturating_sub(1));
    for v in 1..n {
        let open: Vec<usize> = (0..v).filter(|&u| degree[u] < 4).collect();
        let u = *open.choose(rng).expect("a tree always has an open carbon");
        degree[u] += 1;
        degree[v] += 1;
        bonds.push(single(u, v));
    }
    finish(atoms, bonds)
}

/// A random connected C/N/O graph with single bonds that respects default
/// valences and closes at most one ring.
pub fn random_molecule<R: Rng>(n: usize, rng: &mut R) -> MolGraph {
    let pool = [Element::C, Element::C, Element::C, Element::N, Element::O];
    let atoms: Vec<Atom> = (0..n).map(|_| atom(*pool.choose(rng).expect("pool"))).collect();
    let cap: Vec<usize> = atoms.iter().map(|a| a.element.default_valences()[0] as usize).collect();
    let mut degree = vec![0usize; n];
    let mut bonds = Vec::new();
    for v in 1..n {
        let open: Vec<usize> = (0..v).filter(|&u| degree[u] < cap[u]).collect();
        let Some(&u) = open.choose(rng) else { break };
        degree[u] += 1;
        degree[v] += 1;
        bonds.push(single(u, v));
    }
    if n >= 4 && rng.gen_bool(0.5) {
        let mut candidates = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let adjacent = bonds.iter().any(|b| (b.src, b.dst) == (u, v) || (b.src, b.dst) == (v, u));
                if !adjacent && degree[u] < cap[u] && degree[v] < cap[v] {
                    candidates.push((u, v));
                }
            }
        }
        if let Some(&(u, v)) = candidates.choose(rng) {
            bonds.push(single(u, v));
        }
    }
    finish(atoms, bonds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trees_are_connected_and_acyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..15 {
            let g = random_tree(n, &mut rng);
            assert_eq!(g.atom_count(), n);
            assert_eq!(g.bond_count(), n.saturating_sub(1));
            assert!(g.atoms.iter().all(|a| !a.in_ring && a.degree + a.total_h() as usize == 4));
        }
    }

    #[test]
    fn molecules_respect_valence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(5..=8);
            let g = random_molecule(n, &mut rng);
            assert_eq!(g.atom_count(), n);
            for a in &g.atoms {
                assert!(a.degree <= a.element.default_valences()[0] as usize);
            }
        }
    }
}
