use std::collections::VecDeque;

use super::MolGraph;

/// Marks every bond and atom that lies on at least one cycle.
///
/// A bond is in a ring iff its endpoints stay connected once the bond is
/// removed; an atom is in a ring iff one of its bonds is.
pub fn perceive_rings(g: &mut MolGraph) {
    let n = g.atoms.len();
    let mut seen = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for bi in 0..g.bonds.len() {
        let (src, dst) = (g.bonds[bi].src, g.bonds[bi].dst);
        queue.clear();
        queue.push_back(src);
        seen[src] = bi;
        let mut reached = false;
        'bfs: while let Some(u) = queue.pop_front() {
            for nb in &g.adjacency[u] {
                if nb.bond == bi || seen[nb.atom] == bi {
                    continue;
                }
                if nb.atom == dst {
                    reached = true;
                    break 'bfs;
                }
                seen[nb.atom] = bi;
                queue.push_back(nb.atom);
            }
        }
        g.bonds[bi].in_ring = reached;
    }
    for a in g.atoms.iter_mut() {
        a.in_ring = false;
    }
    for b in &g.bonds {
        if b.in_ring {
            g.atoms[b.src].in_ring = true;
            g.atoms[b.dst].in_ring = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_smiles, Atom, Bond, BondOrder, Element};
    use proptest::prelude::*;

    fn plain_graph(n: usize, edges: &[(usize, usize)]) -> MolGraph {
        let atoms = (0..n)
            .map(|i| Atom {
                element: Element::C,
                aromatic: false,
                formal_charge: 0,
                explicit_h: None,
                implicit_h: 0,
                in_ring: false,
                degree: 0,
                index: i,
            })
            .collect();
        let bonds = edges
            .iter()
            .map(|&(src, dst)| Bond {
                src,
                dst,
                order: BondOrder::Single,
                in_ring: false,
                conjugated: false,
            })
            .collect();
        MolGraph::from_parts(atoms, bonds)
    }

    /// Enumerates every simple cycle by depth-first extension from its
    /// smallest vertex and records the edges and vertices it visits.
    fn cycle_oracle(n: usize, edges: &[(usize, usize)]) -> (Vec<bool>, Vec<bool>) {
        let mut adj = vec![Vec::new(); n];
        for (i, &(a, b)) in edges.iter().enumerate() {
            adj[a].push((b, i));
            adj[b].push((a, i));
        }
        let mut atom_flags = vec![false; n];
        let mut edge_flags = vec![false; edges.len()];
        fn extend(
            start: usize,
            u: usize,
            adj: &[Vec<(usize, usize)>],
            path: &mut Vec<usize>,
            used: &mut Vec<usize>,
            atom_flags: &mut [bool],
            edge_flags: &mut [bool],
        ) {
            for &(v, e) in &adj[u] {
                if used.contains(&e) {
                    continue;
                }
                if v == start && used.len() >= 2 {
                    for &p in path.iter() {
                        atom_flags[p] = true;
                    }
                    for &x in used.iter() {
                        edge_flags[x] = true;
                    }
                    edge_flags[e] = true;
                } else if v > start && !path.contains(&v) {
                    path.push(v);
                    used.push(e);
                    extend(start, v, adj, path, used, atom_flags, edge_flags);
                    path.pop();
                    used.pop();
                }
            }
        }
        for s in 0..n {
            let mut path = vec![s];
            let mut used = Vec::new();
            extend(s, s, &adj, &mut path, &mut used, &mut atom_flags, &mut edge_flags);
        }
        (atom_flags, edge_flags)
    }

    #[test]
    fn benzene_and_chains() {
        let g = parse_smiles("c1ccccc1").unwrap();
        assert!(g.atoms.iter().all(|a| a.in_ring));
        assert!(g.bonds.iter().all(|b| b.in_ring));
        let g = parse_smiles("CCO").unwrap();
        assert!(g.atoms.iter().all(|a| !a.in_ring));
        assert!(g.bonds.iter().all(|b| !b.in_ring));
        let g = parse_smiles("C1CC1C").unwrap();
        let flags: Vec<_> = g.atoms.iter().map(|a| a.in_ring).collect();
        assert_eq!(flags, [true, true, true, false]);
    }

    #[test]
    fn spiro_and_bridge() {
        let g = parse_smiles("C1CCC2(C1)CC2").unwrap();
        assert!(g.atoms.iter().all(|a| a.in_ring));
        let g = parse_smiles("C1CC1CC1CC1").unwrap();
        assert!(!g.bond_between(2, 3).unwrap().in_ring);
        assert!(!g.atoms[3].in_ring);
    }

    proptest! {
        #[test]
        fn matches_cycle_enumeration(
            n in 1usize..=10,
            raw in proptest::collection::vec((0usize..10, 0usize..10), 0..16),
        ) {
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for (a, b) in raw {
                let (a, b) = (a % n, b % n);
                if a == b { continue; }
                let key = (a.min(b), a.max(b));
                if !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == key) {
                    edges.push((a, b));
                }
            }
            let mut g = plain_graph(n, &edges);
            perceive_rings(&mut g);
            let (atoms, bonds) = cycle_oracle(n, &edges);
            let got_atoms: Vec<bool> = g.atoms.iter().map(|a| a.in_ring).collect();
            let got_bonds: Vec<bool> = g.bonds.iter().map(|b| b.in_ring).collect();
            prop_assert_eq!(got_atoms, atoms);
            prop_assert_eq!(got_bonds, bonds);
        }
    }
}
