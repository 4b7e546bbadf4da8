use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// A voxel site: batch index plus integer grid position at some stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Coord {
    pub batch: u32,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord {
    pub const fn new(batch: u32, x: i32, y: i32, z: i32) -> Self {
        Self { batch, x, y, z }
    }

    /// Packs into one 64-bit word as `batch | z | y | x`, 16 bits each, so
    /// that integer order on keys equals the canonical `(batch, z, y, x)`
    /// order. Returns `None` when any component leaves `0..=u16::MAX`.
    #[inline]
    pub fn key(&self) -> Option<u64> {
        const MAX: i32 = u16::MAX as i32;
        if self.batch > u16::MAX as u32
            || !(0..=MAX).contains(&self.x)
            || !(0..=MAX).contains(&self.y)
            || !(0..=MAX).contains(&self.z)
        {
            return None;
        }
        Some(
            (self.batch as u64) << 48
                | (self.z as u64) << 32
                | (self.y as u64) << 16
                | self.x as u64,
        )
    }

    pub fn from_key(key: u64) -> Self {
        Self {
            batch: (key >> 48) as u32,
            z: ((key >> 32) & 0xffff) as i32,
            y: ((key >> 16) & 0xffff) as i32,
            x: (key & 0xffff) as i32,
        }
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.batch, self.x + dx, self.y + dy, self.z + dz)
    }

    #[inline]
    pub fn scale(&self, f: i32) -> Self {
        Self::new(self.batch, self.x * f, self.y * f, self.z * f)
    }

    #[inline]
    pub fn floor_div(&self, s: i32) -> Self {
        Self::new(
            self.batch,
            self.x.div_euclid(s),
            self.y.div_euclid(s),
            self.z.div_euclid(s),
        )
    }

    pub fn xyz(&self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }

    fn order_tuple(&self) -> (u32, i32, i32, i32) {
        (self.batch, self.z, self.y, self.x)
    }
}

impl Ord for Coord {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_tuple().cmp(&other.order_tuple())
    }
}

impl PartialOrd for Coord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.batch, self.x, self.y, self.z)
    }
}

/// Canonically ordered set of active coordinates with its inverse map.
#[derive(Clone, Debug, Default)]
pub struct CoordSet {
    coords: Vec<Coord>,
    index: HashMap<u64, u32>,
}

impl CoordSet {
    /// Sorts `coords` canonically. Returns the set together with the sort
    /// permutation: `perm[row] = position of that coord in the input list`.
    pub fn build(coords: &[Coord]) -> Result<(Self, Vec<usize>)> {
        let mut keyed = Vec::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            let key = c.key().ok_or(Error::CoordOverflow(*c))?;
            keyed.push((key, i));
        }
        keyed.sort_unstable();
        for w in keyed.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateCoord(coords[w[0].1]));
            }
        }
        let mut index = HashMap::with_capacity(keyed.len());
        let mut sorted = Vec::with_capacity(keyed.len());
        let mut perm = Vec::with_capacity(keyed.len());
        for (row, &(key, i)) in keyed.iter().enumerate() {
            index.insert(key, row as u32);
            sorted.push(coords[i]);
            perm.push(i);
        }
        Ok((
            Self {
                coords: sorted,
                index,
            },
            perm,
        ))
    }

    /// Builds from coordinates that may repeat; duplicates collapse.
    pub fn from_unsorted_dedup(coords: impl IntoIterator<Item = Coord>) -> Result<Self> {
        let mut keys = Vec::new();
        for c in coords {
            keys.push(c.key().ok_or(Error::CoordOverflow(c))?);
        }
        keys.sort_unstable();
        keys.dedup();
        let coords: Vec<Coord> = keys.iter().map(|&k| Coord::from_key(k)).collect();
        let index = keys
            .iter()
            .enumerate()
            .map(|(r, &k)| (k, r as u32))
            .collect();
        Ok(Self { coords, index })
    }

    #[inline]
    pub fn lookup(&self, c: &Coord) -> Option<usize> {
        c.key()
            .and_then(|k| self.index.get(&k))
            .map(|&r| r as usize)
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn num_batches(&self) -> usize {
        self.coords.last().map_or(0, |c| c.batch as usize + 1)
    }
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_sort_and_lookup() {
        let (set, perm) =
            CoordSet::build(&[Coord::new(0, 1, 1, 1), Coord::new(0, 0, 0, 0)]).unwrap();
        assert_eq!(
            set.coords(),
            &[Coord::new(0, 0, 0, 0), Coord::new(0, 1, 1, 1)]
        );
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(set.lookup(&Coord::new(0, 0, 0, 0)), Some(0));
        assert_eq!(set.lookup(&Coord::new(0, 1, 1, 1)), Some(1));
    }

    #[test]
    fn empty_index() {
        let (set, _) = CoordSet::build(&[]).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.lookup(&Coord::new(0, 0, 0, 0)), None);
        assert_eq!(set.lookup(&Coord::new(0, -1, 0, 0)), None);
    }

    #[test]
    fn duplicate_is_named() {
        let c = Coord::new(0, 3, 4, 5);
        match CoordSet::build(&[c, Coord::new(0, 1, 1, 1), c]) {
            Err(Error::DuplicateCoord(d)) => assert_eq!(d, c),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn key_order_matches_canonical_order() {
        let a = Coord::new(0, 9, 0, 0);
        let b = Coord::new(0, 0, 0, 1);
        assert!(a < b);
        assert!(a.key().unwrap() < b.key().unwrap());
        assert_eq!(Coord::from_key(b.key().unwrap()), b);
    }

    #[test]
    fn thousand_random_members_and_non_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut all: Vec<Coord> = (0..40)
            .flat_map(|x| (0..40).flat_map(move |y| (0..4).map(move |z| Coord::new(0, x, y, z))))
            .collect();
        all.shuffle(&mut rng);
        let members = &all[..1000];
        let others = &all[1000..2000];
        let (set, perm) = CoordSet::build(members).unwrap();
        for c in members {
            // oracle: linear scan of the original list
            let pos = members.iter().position(|m| m == c).unwrap();
            let row = set.lookup(c).unwrap();
            assert_eq!(perm[row], pos);
            assert_eq!(set.coords()[row], *c);
        }
        for c in others {
            assert!(!members.contains(c));
            assert_eq!(set.lookup(c), None);
        }
        let off_grid = Coord::new(0, rng.random_range(-5..0), 0, 0);
        assert_eq!(set.lookup(&off_grid), None);
    }
}
