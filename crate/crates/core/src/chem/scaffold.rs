use sha2::{Digest, Sha256};

use super::{Bond, BondOrder, MolGraph};

/// Key shared by every molecule without a ring system.
pub const ACYCLIC_KEY: &str = "ACYCLIC";

/// Molecular framework: repeatedly strips non-ring atoms with at most one
/// neighbor. What remains is the ring systems plus the linkers between them.
/// Expects ring flags to be set (as they are on parser output).
pub fn extract_scaffold(g: &MolGraph) -> MolGraph {
    let n = g.atom_count();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = g.adjacency.iter().map(Vec::len).collect();
    let mut stack: Vec<usize> = (0..n)
        .filter(|&i| !g.atoms[i].in_ring && degree[i] <= 1)
        .collect();
    while let Some(u) = stack.pop() {
        if !alive[u] {
            continue;
        }
        alive[u] = false;
        for v in g.neighbors(u) {
            if alive[v] {
                degree[v] -= 1;
                if !g.atoms[v].in_ring && degree[v] <= 1 {
                    stack.push(v);
                }
            }
        }
    }

    let mut remap = vec![usize::MAX; n];
    let mut atoms = Vec::new();
    for (i, a) in g.atoms.iter().enumerate() {
        if alive[i] {
            remap[i] = atoms.len();
            atoms.push(a.clone());
        }
    }
    let bonds = g
        .bonds
        .iter()
        .filter(|b| alive[b.src] && alive[b.dst])
        .map(|b| Bond {
            src: remap[b.src],
            dst: remap[b.dst],
            ..b.clone()
        })
        .collect();
    MolGraph::from_parts(atoms, bonds)
}

fn order_code(o: BondOrder) -> u8 {
    match o {
        BondOrder::Single => 1,
        BondOrder::Double => 2,
        BondOrder::Triple => 3,
        BondOrder::Aromatic => 4,
    }
}

fn hash_words(words: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for w in words {
        h.update(w.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Permutation-invariant grouping key for a scaffold.
///
/// Atom invariants start from (element, aromaticity, incident bond orders)
/// and are refined for `n` rounds by hashing each atom together with the
/// sorted multiset of (bond order, neighbor invariant). Isomorphic graphs
/// always map to the same key.
pub fn scaffold_key(g: &MolGraph) -> String {
    let n = g.atom_count();
    if n == 0 {
        return ACYCLIC_KEY.to_string();
    }
    let mut inv: Vec<u64> = g
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut words = vec![a.element.atomic_number() as u64, a.aromatic as u64];
            let mut orders: Vec<u64> = g.adjacency[i]
                .iter()
                .map(|nb| order_code(g.bonds[nb.bond].order) as u64)
                .collect();
            orders.sort_unstable();
            words.extend(orders);
            hash_words(&words)
        })
        .collect();

    let mut scratch: Vec<(u64, u64)> = Vec::new();
    for _ in 0..n {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                scratch.clear();
                scratch.extend(
                    g.adjacency[i]
                        .iter()
                        .map(|nb| (order_code(g.bonds[nb.bond].order) as u64, inv[nb.atom])),
                );
                scratch.sort_unstable();
                let mut words = Vec::with_capacity(1 + 2 * scratch.len());
                words.push(inv[i]);
                for &(o, h) in &scratch {
                    words.push(o);
                    words.push(h);
                }
                hash_words(&words)
            })
            .collect();
        inv = next;
    }
    inv.sort_unstable();
    let mut h = Sha256::new();
    h.update((n as u64).to_le_bytes());
    h.update((g.bond_count() as u64).to_le_bytes());
    for v in &inv {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_smiles, Element};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scaffold_of(s: &str) -> MolGraph {
        extract_scaffold(&parse_smiles(s).unwrap())
    }

    #[test]
    fn ethylbenzene_prunes_to_ring() {
        let s = scaffold_of("CCc1ccccc1");
        assert_eq!(s.atom_count(), 6);
        assert!(s.atoms.iter().all(|a| a.aromatic && a.element == Element::C));
        assert_eq!(s.bond_count(), 6);
    }

    #[test]
    fn acyclic_is_empty() {
        let s = scaffold_of("CCO");
        assert!(s.is_empty());
        assert_eq!(scaffold_key(&s), ACYCLIC_KEY);
        assert!(scaffold_of("C").is_empty());
        assert!(scaffold_of("CC.O").is_empty());
    }

    #[test]
    fn linker_is_retained() {
        let s = scaffold_of("c1ccccc1Cc1ccccc1");
        assert_eq!(s.atom_count(), 13);
        assert_eq!(s.bond_count(), 14);
    }

    #[test]
    fn salt_counterion_is_dropped() {
        let s = scaffold_of("c1ccccc1C(=O)[O-].[Na+]");
        assert_eq!(s.atom_count(), 6);
    }

    #[test]
    fn same_graph_different_writing() {
        let a = scaffold_key(&scaffold_of("c1ccccc1"));
        let b = scaffold_key(&scaffold_of("c1ccc(cc1)"));
        let c = scaffold_key(&scaffold_of("Oc1ccc(CC)cc1"));
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_ne!(a, scaffold_key(&scaffold_of("C1CCCCC1")));
        assert_ne!(a, scaffold_key(&scaffold_of("c1ccncc1")));
    }

    #[test]
    fn idempotent_on_examples() {
        for s in ["CCc1ccccc1", "c1ccccc1Cc1ccccc1", "CC(C)C1CCC(C)CC1O", "C1CC2CCC1C2CCN"] {
            let once = scaffold_of(s);
            assert_eq!(extract_scaffold(&once), once);
        }
    }

    #[test]
    fn ten_atom_scaffold_relabelings() {
        // naphthalene + two-atom linker = 12 atoms; decalin-ish 10-atom frame
        let g = scaffold_of("C1CCC2CCCCC2C1");
        assert_eq!(g.atom_count(), 10);
        let key = scaffold_key(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..g.atom_count()).collect();
            perm.shuffle(&mut rng);
            assert_eq!(scaffold_key(&g.relabel(&perm)), key);
        }
    }

    proptest! {
        #[test]
        fn key_is_permutation_invariant(
            idx in 0usize..6,
            seed in any::<u64>(),
        ) {
            let smiles = [
                "c1ccc2ccccc2c1",
                "C1CC1c1ccc(Cc2cc[nH]c2)cc1",
                "O=C1CCC(=O)N1",
                "c1ccc(-c2ccccn2)cc1",
                "C1CC2CC1C2",
                "c1ccc2c(c1)oc1ccccc12",
            ];
            let g = scaffold_of(smiles[idx]);
            prop_assert_eq!(extract_scaffold(&g), g.clone());
            let mut perm: Vec<usize> = (0..g.atom_count()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(scaffold_key(&g.relabel(&perm)), scaffold_key(&g));
        }
    }
}
