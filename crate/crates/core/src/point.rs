//! Points, keys and 3-sided queries.
//!
//! Every structure orders points by *effective keys*: a coordinate paired
//! with the point id, compared lexicographically. Two distinct points never
//! share an effective key, even when their coordinates collide (grid and
//! Zipf inputs collide constantly).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};

use crate::error::{Error, Result};

pub type PointId = u64;

/// A coordinate paired with a point id; totally ordered.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub v: f64,
    pub id: PointId,
}

impl Key {
    /// Greater than every key of a real point.
    pub const INFINITY: Key = Key {
        v: f64::INFINITY,
        id: PointId::MAX,
    };
    /// Less than every key of a real point.
    pub const NEG_INFINITY: Key = Key {
        v: f64::NEG_INFINITY,
        id: 0,
    };

    pub fn new(v: f64, id: PointId) -> Self {
        Key { v, id }
    }

    /// Smallest key whose coordinate equals `v`.
    pub fn lowest(v: f64) -> Self {
        Key { v, id: 0 }
    }

    /// Largest key whose coordinate equals `v`.
    pub fn highest(v: f64) -> Self {
        Key { v, id: PointId::MAX }
    }

    pub fn is_infinite(&self) -> bool {
        self.v.is_infinite()
    }
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.v.total_cmp(&other.v).then(self.id.cmp(&other.id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub id: PointId,
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(id: PointId, x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::domain(format!(
                "point {id} has non-finite coordinates ({x}, {y})"
            )));
        }
        if id == PointId::MAX {
            return Err(Error::domain("point id u64::MAX is reserved"));
        }
        Ok(Point { id, x, y })
    }

    #[inline]
    pub fn xkey(&self) -> Key {
        Key::new(self.x, self.id)
    }

    #[inline]
    pub fn ykey(&self) -> Key {
        Key::new(self.y, self.id)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}({}, {})", self.id, self.x, self.y)
    }
}

/// The region `[a, b] × (−∞, c]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query3 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Query3 {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if a.is_nan() || b.is_nan() || c.is_nan() {
            return Err(Error::domain("query bounds must not be NaN"));
        }
        if a > b {
            return Err(Error::domain(format!("query has a > b ({a} > {b})")));
        }
        Ok(Query3 { a, b, c })
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        self.a <= p.x && p.x <= self.b && p.y <= self.c
    }

    #[inline]
    pub fn contains_x(&self, x: f64) -> bool {
        self.a <= x && x <= self.b
    }

    /// Smallest x-key inside the query's x-range.
    pub fn lo_key(&self) -> Key {
        Key::lowest(self.a)
    }

    /// Largest x-key inside the query's x-range.
    pub fn hi_key(&self) -> Key {
        Key::highest(self.b)
    }

    /// Largest y-key inside the query's y-range.
    pub fn c_key(&self) -> Key {
        Key::highest(self.c)
    }
}

/// A multiset of points with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        check_unique_ids(&points)?;
        Ok(PointSet { points })
    }

    /// Builds points with ids `0..xs.len()` from coordinate columns.
    pub fn from_coords(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::domain("coordinate columns differ in length"));
        }
        let points = xs
            .iter()
            .zip(ys)
            .enumerate()
            .map(|(i, (&x, &y))| Point::new(i as PointId, x, y))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointSet { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn sort_by_x(&mut self) {
        self.points.sort_by_key(Point::xkey);
    }

    pub fn is_sorted_by_x(&self) -> bool {
        self.points.windows(2).all(|w| w[0].xkey() < w[1].xkey())
    }

    /// Writes `id,x,y` rows with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "id,x,y")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.id, fmt_real(p.x), fmt_real(p.y))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::domain(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("id")) {
                continue;
            }
            let mut cols = line.split(',');
            let mut next = |name: &str| {
                cols.next()
                    .ok_or_else(|| Error::domain(format!("line {}: missing {name}", lineno + 1)))
            };
            let bad = |what: &str| Error::domain(format!("line {}: bad {what}", lineno + 1));
            let id = next("id")?.trim().parse().map_err(|_| bad("id"))?;
            let x = next("x")?.trim().parse().map_err(|_| bad("x"))?;
            let y = next("y")?.trim().parse().map_err(|_| bad("y"))?;
            points.push(Point::new(id, x, y)?);
        }
        PointSet::new(points)
    }
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn check_unique_ids(points: &[Point]) -> Result<()> {
    let mut seen = HashSet::with_capacity(points.len());
    for p in points {
        if !seen.insert(p.id) {
            return Err(Error::DuplicateId(p.id));
        }
    }
    Ok(())
}

/// Linear-scan ground truth. Returns ids sorted ascending.
pub fn brute_force_query(points: &[Point], q: &Query3) -> Vec<PointId> {
    let mut ids: Vec<PointId> = points.iter().filter(|p| q.contains(p)).map(|p| p.id).collect();
    ids.sort_unstable();
    ids
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The eight-point example set; ids 1..=8 match the point numbers.
    pub fn p8() -> Vec<Point> {
        [
            (1., 5.),
            (2., 3.),
            (3., 8.),
            (4., 1.),
            (5., 7.),
            (6., 2.),
            (7., 6.),
            (8., 4.),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Point::new(i as PointId + 1, x, y).unwrap())
        .collect()
    }

    pub fn q(a: f64, b: f64, c: f64) -> Query3 {
        Query3::new(a, b, c).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn brute_force_examples() {
        let pts = p8();
        assert_eq!(brute_force_query(&pts, &q(2., 6., 3.)), vec![2, 4, 6]);
        assert!(brute_force_query(&pts, &q(0., 9., 0.)).is_empty());
        assert_eq!(brute_force_query(&pts, &q(4., 4., 1.)), vec![4]);
    }

    #[test]
    fn keys_break_ties_by_id() {
        let a = Point::new(1, 2.0, 3.0).unwrap();
        let b = Point::new(2, 2.0, 3.0).unwrap();
        assert!(a.xkey() < b.xkey());
        assert!(a.ykey() < b.ykey());
        assert!(Key::lowest(2.0) <= a.xkey() && b.xkey() <= Key::highest(2.0));
        assert!(b.ykey() < Key::INFINITY);
        assert!(Key::NEG_INFINITY < a.xkey());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Point::new(0, f64::NAN, 0.0).is_err());
        assert!(Point::new(0, 0.0, f64::INFINITY).is_err());
        assert!(Query3::new(2.0, 1.0, 0.0).is_err());
        let p = Point::new(3, 0.0, 0.0).unwrap();
        assert_eq!(PointSet::new(vec![p, p]), Err(Error::DuplicateId(3)));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let set = PointSet::new(vec![
            Point::new(7, 0.1 + 0.2, -1e-300).unwrap(),
            Point::new(9, 12345.678901234567, 3.0).unwrap(),
        ])
        .unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,x,y\n7,3.0000000000000004e-1,"));
        let back = PointSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, set);
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((0i32..20, 0i32..20), 0..40).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y))| Point::new(i as u64, x as f64, y as f64).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn brute_force_is_monotone_in_c(pts in arb_points(), a in 0i32..20, w in 0i32..20, c1 in -1i32..21, dc in 0i32..10) {
            let q1 = q(a as f64, (a + w) as f64, c1 as f64);
            let q2 = q(a as f64, (a + w) as f64, (c1 + dc) as f64);
            let r1 = brute_force_query(&pts, &q1);
            let r2 = brute_force_query(&pts, &q2);
            prop_assert!(r1.iter().all(|id| r2.binary_search(id).is_ok()));
            prop_assert_eq!(&r1, &brute_force_query(&pts, &q1));
        }
    }
}
