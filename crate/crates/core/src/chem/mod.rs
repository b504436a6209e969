//! Molecular graphs: SMILES parsing, ring perception and scaffold extraction.

mod element;
mod rings;
mod scaffold;
mod smiles;

pub use element::Element;
pub use rings::perceive_rings;
pub use scaffold::{extract_scaffold, scaffold_key, ACYCLIC_KEY};
pub use smiles::{parse_smiles, ParseError, ParseErrorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Bond order with aromatic bonds counted as one; the aromatic pi
    /// contribution is accounted for separately by the valence model.
    pub fn sigma_order(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub fn valence_contribution(self) -> f64 {
        match self {
            BondOrder::Single => 1.0,
            BondOrder::Double => 2.0,
            BondOrder::Triple => 3.0,
            BondOrder::Aromatic => 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i32,
    /// Hydrogen count written inside a bracket atom.
    pub explicit_h: Option<u32>,
    pub implicit_h: u32,
    pub in_ring: bool,
    /// Number of heavy-atom (graph) neighbors.
    pub degree: usize,
    pub index: usize,
}

impl Atom {
    pub fn total_h(&self) -> u32 {
        self.implicit_h + self.explicit_h.unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub src: usize,
    pub dst: usize,
    pub order: BondOrder,
    pub in_ring: bool,
    pub conjugated: bool,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.src == atom {
            self.dst
        } else {
            self.src
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub atom: usize,
    pub bond: usize,
}

/// An attributed molecular graph. Fragments separated by `.` stay in one
/// graph, so it may be disconnected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub adjacency: Vec<Vec<Neighbor>>,
}

impl MolGraph {
    /// Assembles a graph, rebuilding adjacency, atom indices and degrees
    /// from the bond list. Ring and conjugation flags are taken as given.
    pub fn from_parts(mut atoms: Vec<Atom>, bonds: Vec<Bond>) -> MolGraph {
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for (i, b) in bonds.iter().enumerate() {
            adjacency[b.src].push(Neighbor { atom: b.dst, bond: i });
            adjacency[b.dst].push(Neighbor { atom: b.src, bond: i });
        }
        for (i, a) in atoms.iter_mut().enumerate() {
            a.index = i;
            a.degree = adjacency[i].len();
        }
        MolGraph {
            atoms,
            bonds,
            adjacency,
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn neighbors(&self, atom: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[atom].iter().map(|n| n.atom)
    }

    pub fn bond_between(&self, u: usize, v: usize) -> Option<&Bond> {
        self.adjacency[u]
            .iter()
            .find(|n| n.atom == v)
            .map(|n| &self.bonds[n.bond])
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    ///
    /// Panics if `perm` is not a permutation of `0..atom_count()`.
    pub fn relabel(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length");
        let mut slots: Vec<Option<Atom>> = vec![None; self.atoms.len()];
        for (old, atom) in self.atoms.iter().enumerate() {
            assert!(slots[perm[old]].is_none(), "not a permutation");
            slots[perm[old]] = Some(atom.clone());
        }
        let atoms = slots.into_iter().map(|a| a.unwrap()).collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                src: perm[b.src],
                dst: perm[b.dst],
                ..b.clone()
            })
            .collect();
        MolGraph::from_parts(atoms, bonds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relabel_keeps_adjacency_consistent() {
        let g = parse_smiles("CC(=O)N").unwrap();
        let h = g.relabel(&[3, 2, 0, 1]);
        assert_eq!(h.atoms[3].element, Element::C);
        assert_eq!(h.atoms[1].element, Element::N);
        assert_eq!(h.bond_between(2, 0).unwrap().order, BondOrder::Double);
        for (u, list) in h.adjacency.iter().enumerate() {
            for n in list {
                assert!(h.adjacency[n.atom].iter().any(|m| m.atom == u));
            }
        }
    }
}
