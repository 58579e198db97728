//! Consistency and stability against an independent brute-force implementation.

mod common;

use partproto::metrics::{part_vector, BoundingBox, BoxSize};
use partproto::synthdata::{PartAnnotation, Point};

#[test]
fn fifty_random_fixtures_match_exactly() {
    let scores: Vec<(f64, f64)> = (0..50).map(|seed| common::oracle_fixture(seed).unwrap()).collect();
    let mut con: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let mut sta: Vec<f64> = scores.iter().map(|s| s.1).collect();
    for v in [&mut con, &mut sta] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    assert!(con.len() >= 3 && sta.len() >= 3, "fixtures too uniform: {con:?} {sta:?}");
}

#[test]
fn membership_matches_all_pixel_scan() {
    let size = BoxSize::from_ratio(64, 0.321).unwrap();
    let b = BoundingBox::centered(10, 10, size, 64, 64);
    for (x, y) in [(10.0, 10.0), (40.0, 40.0), (0.0, 0.0), (20.5, 20.99), (21.0, 5.0)] {
        let part = PartAnnotation { id: 0, location: Some(Point::new(x, y)) };
        let scan = (0..64usize)
            .flat_map(|r| (0..64usize).map(move |c| (r, c)))
            .filter(|&(r, c)| r >= b.top && r < b.bottom && c >= b.left && c < b.right)
            .any(|(r, c)| r == y as usize && c == x as usize);
        assert_eq!(part_vector(&b, &[part], 1)[0], scan, "point ({x}, {y})");
    }
}
