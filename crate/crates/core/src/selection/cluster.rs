//! Two-way clustering of histogram vectors.

use std::collections::BTreeMap;

use rand::Rng;

/// Centroid, size and members.
type Cluster = (Vec<f64>, f64, Vec<usize>);

const MAX_ITERATIONS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of<'a>(points: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for p in points {
        for (s, x) in sum.iter_mut().zip(p) {
            *s += x;
        }
        n += 1;
    }
    if n > 0 {
        for s in &mut sum {
            *s /= n as f64;
        }
    }
    sum
}

/// Result of a two-way split: a 0/1 label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub labels: Vec<usize>,
    /// Set when a cluster came out empty and one point was moved to fill it.
    pub repaired: bool,
}

/// If one side is empty, moves the point farthest from the overall centroid
/// (lowest index on ties) into it.
fn repair(points: &[Vec<f64>], labels: &mut [usize]) -> bool {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if ones != 0 && ones != labels.len() {
        return false;
    }
    let dim = points.first().map_or(0, Vec::len);
    let centroid = mean_of(points.iter(), dim);
    let mut far = 0;
    let mut far_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = sq_dist(p, &centroid);
        if d > far_d {
            far = i;
            far_d = d;
        }
    }
    let empty = if ones == 0 { 1 } else { 0 };
    labels[far] = empty;
    true
}

/// k-means with k = 2, k-means++ seeding and Lloyd iterations until the
/// assignment is stable (at most 100 rounds).
pub fn kmeans2<R: Rng>(points: &[Vec<f64>], rng: &mut R) -> Split {
    let n = points.len();
    assert!(n >= 2, "need at least two points");
    let dim = points[0].len();

    let first = rng.gen_range(0..n);
    let weights: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    let total: f64 = weights.iter().sum();
    let second = if total > 0.0 {
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        pick
    } else {
        rng.gen_range(0..n)
    };
    let mut centers = [points[first].clone(), points[second].clone()];

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let label = usize::from(sq_dist(p, &centers[1]) < sq_dist(p, &centers[0]));
            if labels[i] != label {
                labels[i] = label;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (k, center) in centers.iter_mut().enumerate() {
            if labels.contains(&k) {
                *center = mean_of(
                    points
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l == k)
                        .map(|(p, _)| p),
                    dim,
                );
            }
        }
    }
    let repaired = repair(points, &mut labels);
    Split { labels, repaired }
}

/// Agglomerative clustering with Ward linkage, cut at two clusters.
///
/// Identical points are grouped first; merging them costs nothing under Ward,
/// so the result equals running on the raw points.
pub fn ward2(points: &[Vec<f64>]) -> Split {
    let n = points.len();
    assert!(n >= 2, "need at least two points");

    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        groups
            .entry(p.iter().map(|x| x.to_bits()).collect())
            .or_default()
            .push(i);
    }
    let mut clusters: Vec<Option<Cluster>> = groups
        .into_values()
        .map(|members| {
            let centroid = points[members[0]].clone();
            let size = members.len() as f64;
            Some((centroid, size, members))
        })
        .collect();

    let cost = |a: &(Vec<f64>, f64, Vec<usize>), b: &(Vec<f64>, f64, Vec<usize>)| {
        a.1 * b.1 / (a.1 + b.1) * sq_dist(&a.0, &b.0)
    };
    let m = clusters.len();
    let mut costs = vec![vec![f64::INFINITY; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            costs[i][j] = cost(clusters[i].as_ref().unwrap(), clusters[j].as_ref().unwrap());
        }
    }

    let mut active = m;
    while active > 2 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..m {
            if clusters[i].is_none() {
                continue;
            }
            for j in (i + 1)..m {
                if clusters[j].is_some() && costs[i][j] < best.0 {
                    best = (costs[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        let (cj, sj, mj) = clusters[j].take().unwrap();
        let (ci, si, mi) = clusters[i].as_mut().unwrap();
        let total = *si + sj;
        for (x, y) in ci.iter_mut().zip(&cj) {
            *x = (*x * *si + y * sj) / total;
        }
        *si = total;
        mi.extend(mj);
        active -= 1;
        for k in 0..m {
            if k == i || clusters[k].is_none() {
                continue;
            }
            let c = cost(clusters[i].as_ref().unwrap(), clusters[k].as_ref().unwrap());
            let (a, b) = if k < i { (k, i) } else { (i, k) };
            costs[a][b] = c;
        }
    }

    let mut labels = vec![0; n];
    for (label, (_, _, members)) in clusters.iter().flatten().enumerate() {
        for &p in members {
            labels[p] = label;
        }
    }
    let repaired = repair(points, &mut labels);
    Split { labels, repaired }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn pts(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    fn groups(split: &Split) -> (Vec<usize>, Vec<usize>) {
        let a = (0..split.labels.len())
            .filter(|&i| split.labels[i] == split.labels[0])
            .collect();
        let b = (0..split.labels.len())
            .filter(|&i| split.labels[i] != split.labels[0])
            .collect();
        (a, b)
    }

    #[test]
    fn kmeans_separates_obvious_groups() {
        let p = pts(&[
            &[0.0, 0.0],
            &[0.0, 1.0],
            &[10.0, 10.0],
            &[10.0, 11.0],
            &[1.0, 0.0],
        ]);
        for s in 0..20 {
            let split = kmeans2(&p, &mut seed::rng(s));
            assert_eq!(groups(&split), (vec![0, 1, 4], vec![2, 3]));
            assert!(!split.repaired);
        }
    }

    #[test]
    fn ward_separates_obvious_groups() {
        let p = pts(&[
            &[0.0, 0.0],
            &[0.0, 1.0],
            &[10.0, 10.0],
            &[10.0, 11.0],
            &[1.0, 0.0],
            &[0.0, 0.0],
        ]);
        let split = ward2(&p);
        assert_eq!(groups(&split), (vec![0, 1, 4, 5], vec![2, 3]));
    }

    #[test]
    fn identical_points_are_repaired() {
        let p = pts(&[&[1.0], &[1.0], &[1.0]]);
        let split = kmeans2(&p, &mut seed::rng(1));
        assert!(split.repaired);
        assert_eq!(
            split
                .labels
                .iter()
                .filter(|&&l| l != split.labels[1])
                .count(),
            1
        );
        let split = ward2(&p);
        assert!(split.repaired);
    }

    #[test]
    fn ward_matches_brute_force_on_small_sets() {
        // brute force: replay Ward merges on raw points without grouping
        fn naive(points: &[Vec<f64>]) -> Vec<usize> {
            let mut cl: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
            let centroid = |c: &Vec<usize>| {
                let mut m = vec![0.0; points[0].len()];
                for &i in c {
                    for (a, b) in m.iter_mut().zip(&points[i]) {
                        *a += b / c.len() as f64;
                    }
                }
                m
            };
            while cl.len() > 2 {
                let mut best = (f64::INFINITY, 0, 0);
                for i in 0..cl.len() {
                    for j in (i + 1)..cl.len() {
                        let (ni, nj) = (cl[i].len() as f64, cl[j].len() as f64);
                        let c = ni * nj / (ni + nj) * sq_dist(&centroid(&cl[i]), &centroid(&cl[j]));
                        if c < best.0 - 1e-12 {
                            best = (c, i, j);
                        }
                    }
                }
                let moved = cl.remove(best.2);
                cl[best.1].extend(moved);
            }
            let mut labels = vec![0; points.len()];
            for &i in &cl[1] {
                labels[i] = 1;
            }
            labels
        }
        use rand::Rng;
        let mut rng = seed::rng(99);
        for _ in 0..50 {
            let n = rng.gen_range(3..12);
            // continuous coordinates keep merge costs distinct
            let p: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0])
                .collect();
            let expected = naive(&p);
            let got = ward2(&p).labels;
            let same = got == expected || got.iter().zip(&expected).all(|(a, b)| a != b);
            assert!(same, "{p:?}");
        }
    }
}
