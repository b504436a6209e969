//! SMILES reader for the organic subset, bracket atoms, branches, ring
//! closures and dot-separated fragments. Stereo marks are read and dropped.

use std::collections::BTreeMap;
use std::fmt;

use super::rings::perceive_rings;
use super::{Atom, Bond, BondOrder, Element, MolGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    UnclosedRing,
    UnbalancedParen,
    UnknownAtom,
    BadBracket,
    /// A bond symbol with no atom on one side, or an empty branch.
    DanglingBond,
    /// Ring closure onto the same atom or a second bond between one pair.
    InvalidRingBond,
    UnexpectedChar,
    ValenceOverflow,
    AromaticOutsideRing,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} at byte {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
}

impl ParseError {
    fn new(kind: ParseErrorKind, offset: usize) -> Self {
        ParseError { kind, offset }
    }
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingBond {
    order: BondOrder,
}

struct RawBond {
    src: usize,
    dst: usize,
    order: BondOrder,
    /// Aromatic orders that were inferred from two lowercase neighbors.
    implied: bool,
}

struct RingOpen {
    atom: usize,
    bond: Option<BondOrder>,
    offset: usize,
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<RawBond>,
    /// Byte offset of each atom token, for diagnostics after parsing.
    atom_offsets: Vec<usize>,
    bracketed: Vec<bool>,
}

/// Parses a SMILES string into a [`MolGraph`] with ring flags, conjugation
/// flags and implicit hydrogens filled in. Leading whitespace is skipped and
/// the first whitespace after the molecule ends it, so a trailing title
/// field is ignored.
pub fn parse_smiles(text: &str) -> Result<MolGraph, ParseError> {
    let start = text.len() - text.trim_start().len();
    let end = text[start..].find(char::is_whitespace).map_or(text.len(), |i| start + i);
    if start == end {
        return Err(ParseError::new(ParseErrorKind::Empty, 0));
    }
    let mut p = Parser {
        text: &text.as_bytes()[..end],
        pos: start,
        atoms: Vec::new(),
        bonds: Vec::new(),
        atom_offsets: Vec::new(),
        bracketed: Vec::new(),
    };
    p.run()?;
    p.finish()
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn peek_at(&self, k: usize) -> Option<u8> {
        self.text.get(self.pos + k).copied()
    }

    fn err<T>(&self, kind: ParseErrorKind, offset: usize) -> Result<T, ParseError> {
        Err(ParseError::new(kind, offset))
    }

    fn run(&mut self) -> Result<(), ParseError> {
        let mut prev: Option<usize> = None;
        let mut pending: Option<(PendingBond, usize)> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();
        // An atom must follow '(' before the branch can close.
        let mut branch_has_atom = true;

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    self.pos += 1;
                    if pending.is_some() || prev.is_none() {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        _ => BondOrder::Single,
                    };
                    pending = Some((PendingBond { order }, start));
                }
                b'(' => {
                    self.pos += 1;
                    if prev.is_none() || pending.is_some() {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    branches.push((prev, start));
                    branch_has_atom = false;
                }
                b')' => {
                    self.pos += 1;
                    let Some((anchor, _)) = branches.pop() else {
                        return self.err(ParseErrorKind::UnbalancedParen, start);
                    };
                    if pending.is_some() || !branch_has_atom {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    prev = anchor;
                }
                b'.' => {
                    self.pos += 1;
                    if pending.is_some() || prev.is_none() {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    }
                    if !branches.is_empty() {
                        return self.err(ParseErrorKind::UnbalancedParen, start);
                    }
                    prev = None;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return self.err(ParseErrorKind::DanglingBond, start);
                    };
                    let label = self.ring_label()?;
                    let bond = pending.take().map(|(b, _)| b.order);
                    match rings.remove(&label) {
                        None => {
                            rings.insert(
                                label,
                                RingOpen {
                                    atom,
                                    bond,
                                    offset: start,
                                },
                            );
                        }
                        Some(open) => {
                            let order = match (open.bond, bond) {
                                (Some(a), Some(b)) if a != b => {
                                    return self.err(ParseErrorKind::InvalidRingBond, start)
                                }
                                (Some(a), _) | (None, Some(a)) => Some(a),
                                (None, None) => None,
                            };
                            self.connect(open.atom, atom, order, start)?;
                        }
                    }
                }
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.link(prev, atom, pending.take())?;
                    prev = Some(atom);
                    branch_has_atom = true;
                }
                b'A'..=b'Z' | b'a'..=b'z' => {
                    let atom = self.organic_atom()?;
                    self.link(prev, atom, pending.take())?;
                    prev = Some(atom);
                    branch_has_atom = true;
                }
                _ => return self.err(ParseErrorKind::UnexpectedChar, start),
            }
        }

        if let Some((_, offset)) = pending {
            return self.err(ParseErrorKind::DanglingBond, offset);
        }
        if let Some((_, offset)) = branches.first() {
            return self.err(ParseErrorKind::UnbalancedParen, *offset);
        }
        if let Some(open) = rings.values().next() {
            return self.err(ParseErrorKind::UnclosedRing, open.offset);
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            match (self.peek_at(1), self.peek_at(2)) {
                (Some(a), Some(b)) if a.is_ascii_digit() && b.is_ascii_digit() => {
                    self.pos += 3;
                    Ok(((a - b'0') * 10 + (b - b'0')) as u32)
                }
                _ => self.err(ParseErrorKind::UnexpectedChar, start),
            }
        } else {
            let d = self.peek().unwrap();
            self.pos += 1;
            Ok((d - b'0') as u32)
        }
    }

    fn link(
        &mut self,
        prev: Option<usize>,
        atom: usize,
        pending: Option<(PendingBond, usize)>,
    ) -> Result<(), ParseError> {
        if let Some(p) = prev {
            let offset = self.atom_offsets[atom];
            self.connect(p, atom, pending.map(|(b, _)| b.order), offset)
        } else {
            Ok(())
        }
    }

    /// Adds a bond; `order == None` means the bond was not written and is
    /// aromatic between two aromatic atoms, single otherwise.
    fn connect(
        &mut self,
        a: usize,
        b: usize,
        order: Option<BondOrder>,
        offset: usize,
    ) -> Result<(), ParseError> {
        if a == b
            || self
                .bonds
                .iter()
                .any(|r| (r.src == a && r.dst == b) || (r.src == b && r.dst == a))
        {
            return self.err(ParseErrorKind::InvalidRingBond, offset);
        }
        let both_aromatic = self.atoms[a].aromatic && self.atoms[b].aromatic;
        let (order, implied) = match order {
            Some(BondOrder::Aromatic) if !both_aromatic => {
                return self.err(ParseErrorKind::InvalidRingBond, offset)
            }
            Some(o) => (o, false),
            None if both_aromatic => (BondOrder::Aromatic, true),
            None => (BondOrder::Single, false),
        };
        self.bonds.push(RawBond {
            src: a,
            dst: b,
            order,
            implied,
        });
        Ok(())
    }

    fn push_atom(&mut self, atom: Atom, offset: usize, bracketed: bool) -> usize {
        let index = self.atoms.len();
        self.atoms.push(Atom { index, ..atom });
        self.atom_offsets.push(offset);
        self.bracketed.push(bracketed);
        index
    }

    fn organic_atom(&mut self) -> Result<usize, ParseError> {
        let start = self.pos;
        let c = self.peek().unwrap();
        let two = |x: u8| self.peek_at(1) == Some(x);
        let (element, aromatic, len) = match c {
            b'C' if two(b'l') => (Element::CL, false, 2),
            b'B' if two(b'r') => (Element::BR, false, 2),
            b'B' => (Element::B, false, 1),
            b'C' => (Element::C, false, 1),
            b'N' => (Element::N, false, 1),
            b'O' => (Element::O, false, 1),
            b'P' => (Element::P, false, 1),
            b'S' => (Element::S, false, 1),
            b'F' => (Element::F, false, 1),
            b'I' => (Element::I, false, 1),
            b'b' => (Element::B, true, 1),
            b'c' => (Element::C, true, 1),
            b'n' => (Element::N, true, 1),
            b'o' => (Element::O, true, 1),
            b'p' => (Element::P, true, 1),
            b's' => (Element::S, true, 1),
            _ => return self.err(ParseErrorKind::UnknownAtom, start),
        };
        self.pos += len;
        Ok(self.push_atom(new_atom(element, aromatic, 0, None), start, false))
    }

    fn bracket_atom(&mut self) -> Result<usize, ParseError> {
        let start = self.pos;
        self.pos += 1;
        let Some(rel_end) = self.text[self.pos..].iter().position(|&b| b == b']') else {
            return self.err(ParseErrorKind::BadBracket, start);
        };
        let end = self.pos + rel_end;
        let body = &self.text[self.pos..end];
        self.pos = end + 1;
        let mut i = 0;
        let bad = || ParseError::new(ParseErrorKind::BadBracket, start);

        while i < body.len() && body[i].is_ascii_digit() {
            i += 1;
        }
        // Element symbol: two-letter names first, then one-letter.
        let (element, aromatic) = {
            let rest = &body[i..];
            if rest.is_empty() || !rest[0].is_ascii_alphabetic() {
                return Err(bad());
            }
            let aromatic_two: &[(&[u8], Element)] = &[
                (b"se", Element::from_symbol("Se").unwrap()),
                (b"as", Element::from_symbol("As").unwrap()),
            ];
            let mut found = None;
            for (sym, e) in aromatic_two {
                if rest.starts_with(sym) {
                    found = Some((*e, true, 2));
                }
            }
            if found.is_none() && rest[0].is_ascii_uppercase() {
                if rest.len() >= 2 && rest[1].is_ascii_lowercase() {
                    let sym = std::str::from_utf8(&rest[..2]).unwrap();
                    if let Some(e) = Element::from_symbol(sym) {
                        found = Some((e, false, 2));
                    }
                }
                if found.is_none() {
                    let sym = std::str::from_utf8(&rest[..1]).unwrap();
                    match Element::from_symbol(sym) {
                        Some(e) => found = Some((e, false, 1)),
                        None => return self.err(ParseErrorKind::UnknownAtom, start + 1 + i),
                    }
                }
            }
            if found.is_none() {
                let e = match rest[0] {
                    b'b' => Element::B,
                    b'c' => Element::C,
                    b'n' => Element::N,
                    b'o' => Element::O,
                    b'p' => Element::P,
                    b's' => Element::S,
                    _ => return self.err(ParseErrorKind::UnknownAtom, start + 1 + i),
                };
                found = Some((e, true, 1));
            }
            let (e, aromatic, len) = found.unwrap();
            i += len;
            (e, aromatic)
        };

        // Chirality is consumed and ignored.
        while i < body.len() && body[i] == b'@' {
            i += 1;
        }
        let mut hcount = 0u32;
        if i < body.len() && body[i] == b'H' {
            i += 1;
            hcount = 1;
            let digits_start = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i > digits_start {
                hcount = std::str::from_utf8(&body[digits_start..i])
                    .unwrap()
                    .parse()
                    .map_err(|_| bad())?;
            }
        }
        let mut charge = 0i32;
        if i < body.len() && (body[i] == b'+' || body[i] == b'-') {
            let sign = if body[i] == b'+' { 1 } else { -1 };
            let symbol = body[i];
            i += 1;
            let mut magnitude = 1;
            let digits_start = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i > digits_start {
                magnitude = std::str::from_utf8(&body[digits_start..i])
                    .unwrap()
                    .parse()
                    .map_err(|_| bad())?;
            } else {
                while i < body.len() && body[i] == symbol {
                    magnitude += 1;
                    i += 1;
                }
            }
            charge = sign * magnitude;
        }
        if i < body.len() && body[i] == b':' {
            i += 1;
            let digits_start = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i == digits_start {
                return Err(bad());
            }
        }
        if i != body.len() {
            return Err(bad());
        }
        Ok(self.push_atom(new_atom(element, aromatic, charge, Some(hcount)), start, true))
    }

    fn finish(self) -> Result<MolGraph, ParseError> {
        let Parser {
            atoms,
            bonds: raw,
            atom_offsets,
            bracketed,
            ..
        } = self;
        let bonds: Vec<Bond> = raw
            .iter()
            .map(|r| Bond {
                src: r.src,
                dst: r.dst,
                order: r.order,
                in_ring: false,
                conjugated: false,
            })
            .collect();
        let mut g = MolGraph::from_parts(atoms, bonds);
        perceive_rings(&mut g);

        // Two aromatic atoms joined outside any ring (biphenyl written
        // without '-') are joined by a plain single bond.
        for (b, r) in g.bonds.iter_mut().zip(&raw) {
            if r.implied && !b.in_ring {
                b.order = BondOrder::Single;
            }
        }
        for a in &g.atoms {
            if a.aromatic && !a.in_ring {
                return Err(ParseError::new(
                    ParseErrorKind::AromaticOutsideRing,
                    atom_offsets[a.index],
                ));
            }
        }
        assign_conjugation(&mut g);

        for i in 0..g.atoms.len() {
            if bracketed[i] {
                continue;
            }
            let h = implicit_hydrogens(&g, i)
                .ok_or(ParseError::new(ParseErrorKind::ValenceOverflow, atom_offsets[i]))?;
            g.atoms[i].implicit_h = h;
        }
        Ok(g)
    }
}

fn new_atom(element: Element, aromatic: bool, formal_charge: i32, explicit_h: Option<u32>) -> Atom {
    Atom {
        element,
        aromatic,
        formal_charge,
        explicit_h,
        implicit_h: 0,
        in_ring: false,
        degree: 0,
        index: 0,
    }
}

/// Implicit hydrogens for an unbracketed atom, or `None` when its bonds
/// exceed every standard valence of the element.
fn implicit_hydrogens(g: &MolGraph, atom: usize) -> Option<u32> {
    let a = &g.atoms[atom];
    let valences = a.element.default_valences();
    let bonded: u32 = g.adjacency[atom]
        .iter()
        .map(|n| g.bonds[n.bond].order.sigma_order() as u32)
        .sum();
    let max = *valences.iter().max()? as u32;
    if bonded > max {
        return None;
    }
    if a.aromatic {
        // One valence unit goes to the aromatic pi system.
        let lowest = valences[0] as u32;
        return Some(lowest.saturating_sub(bonded + 1));
    }
    let target = valences.iter().map(|&v| v as u32).find(|&v| v >= bonded)?;
    Some(target - bonded)
}

/// Aromatic bonds are conjugated; a single bond is conjugated when both of
/// its ends carry another multiple or aromatic bond; a double or triple bond
/// is conjugated when it touches a conjugated single bond.
fn assign_conjugation(g: &mut MolGraph) {
    let is_multiple = |o: BondOrder| o != BondOrder::Single;
    let mut flags: Vec<bool> = g
        .bonds
        .iter()
        .map(|b| b.order == BondOrder::Aromatic)
        .collect();
    let end_has_multiple = |g: &MolGraph, atom: usize, skip: usize| {
        g.adjacency[atom]
            .iter()
            .any(|n| n.bond != skip && is_multiple(g.bonds[n.bond].order))
    };
    for (i, b) in g.bonds.iter().enumerate() {
        if b.order == BondOrder::Single
            && end_has_multiple(g, b.src, i)
            && end_has_multiple(g, b.dst, i)
        {
            flags[i] = true;
        }
    }
    let single_conjugated = flags.clone();
    for (i, b) in g.bonds.iter().enumerate() {
        if matches!(b.order, BondOrder::Double | BondOrder::Triple) {
            let touches = [b.src, b.dst].iter().any(|&atom| {
                g.adjacency[atom].iter().any(|n| {
                    n.bond != i
                        && g.bonds[n.bond].order == BondOrder::Single
                        && single_conjugated[n.bond]
                })
            });
            flags[i] = touches;
        }
    }
    for (b, f) in g.bonds.iter_mut().zip(flags) {
        b.conjugated = f;
    }
}
