//! Dominance, non-dominated sorting, crowding distance, tournament
//! selection and 2-D hypervolume. Objectives are minimised.

use rand::Rng;

/// `a` dominates `b`: no worse everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Fast non-dominated sort. Returns fronts of indices, best first; each
/// front is sorted by index.
pub fn nds(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counts = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&points[i], &points[j]) {
                dominated_by[i].push(j);
                counts[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominated_by[j].push(i);
                counts[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                counts[j] -= 1;
                if counts[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Front rank (0 = first front) of every point.
pub fn ranks(points: &[Vec<f64>]) -> Vec<usize> {
    let mut r = vec![0; points.len()];
    for (k, front) in nds(points).into_iter().enumerate() {
        for i in front {
            r[i] = k;
        }
    }
    r
}

/// Crowding distance of each member of `front` (indices into `points`),
/// normalised by the front's range per objective. Boundary members get
/// infinity; a zero-range objective contributes nothing.
pub fn crowding(points: &[Vec<f64>], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let dims = points[front[0]].len();
    for m in 0..dims {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points[front[a]][m].total_cmp(&points[front[b]][m]).then(a.cmp(&b)));
        let lo = points[front[order[0]]][m];
        let hi = points[front[order[n - 1]]][m];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            let gap = points[front[order[w + 1]]][m] - points[front[order[w - 1]]][m];
            dist[order[w]] += gap / range;
        }
    }
    dist
}

/// Rank and crowding distance of every point.
pub fn rank_and_crowding(points: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let mut rank = vec![0; points.len()];
    let mut crowd = vec![0.0; points.len()];
    for (k, front) in nds(points).into_iter().enumerate() {
        let d = crowding(points, &front);
        for (&i, v) in front.iter().zip(d) {
            rank[i] = k;
            crowd[i] = v;
        }
    }
    (rank, crowd)
}

/// `a` is fitter than `b`: lower rank, then larger crowding distance.
fn fitter(rank: &[usize], crowd: &[f64], a: usize, b: usize) -> bool {
    rank[a] < rank[b] || (rank[a] == rank[b] && crowd[a] > crowd[b])
}

/// Best of `arity` uniform picks (with replacement); earlier picks win ties.
pub fn tournament<R: Rng + ?Sized>(rank: &[usize], crowd: &[f64], arity: usize, rng: &mut R) -> usize {
    let n = rank.len();
    assert!(n > 0, "tournament over an empty population");
    let mut best = rng.gen_range(0..n);
    for _ in 1..arity {
        let c = rng.gen_range(0..n);
        if fitter(rank, crowd, c, best) {
            best = c;
        }
    }
    best
}

/// Indices of the `n` survivors by rank then crowding (ties by index).
pub fn survivors(points: &[Vec<f64>], n: usize) -> Vec<usize> {
    let (rank, crowd) = rank_and_crowding(points);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| rank[a].cmp(&rank[b]).then(crowd[b].total_cmp(&crowd[a])).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Area dominated by the non-dominated subset of 2-D `points` and bounded
/// by `reference`. Points not strictly better than the reference in both
/// objectives contribute nothing.
pub fn hypervolume_2d(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> =
        points.iter().copied().filter(|p| p[0] < reference[0] && p[1] < reference[1]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut area = 0.0;
    let mut best_y = reference[1];
    for p in &pts {
        if p[1] < best_y {
            area += (reference[0] - p[0]) * (best_y - p[1]);
            best_y = p[1];
        }
    }
    area
}
