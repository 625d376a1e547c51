//! Farthest-point sampling of centroids and radius grouping of neighbors.

use crate::error::{Result, SpilError};
use crate::numerics::Tensor;

pub type Point3 = [f64; 3];

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledCentroids {
    pub indices: Vec<usize>,
    pub coords: Vec<Point3>,
}

impl SampledCentroids {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Greedy farthest-point sampling starting from `start`.
///
/// Each pick maximizes the minimum distance to the picks so far, ties going
/// to the lowest index. When `n` exceeds the number of points, every point is
/// picked once and the order then repeats cyclically up to length `n`.
pub fn farthest_point_sample(coords: &[Point3], n: usize, start: usize) -> Result<SampledCentroids> {
    let m = coords.len();
    if m == 0 {
        return Err(SpilError::EmptyInput("farthest_point_sample"));
    }
    if n == 0 || start >= m {
        return Err(SpilError::Config(format!(
            "farthest_point_sample needs n >= 1 and start < {m}, got n={n}, start={start}"
        )));
    }
    let picks = n.min(m);
    let mut order = Vec::with_capacity(picks);
    let mut selected = vec![false; m];
    let mut min_dist = vec![f64::INFINITY; m];
    let mut current = start;
    for _ in 0..picks {
        order.push(current);
        selected[current] = true;
        let c = coords[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in coords.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = distance(p, &c);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if best.map_or(true, |(_, bd)| min_dist[i] > bd) {
                best = Some((i, min_dist[i]));
            }
        }
        match best {
            Some((i, _)) => current = i,
            None => break,
        }
    }
    let indices: Vec<usize> = (0..n).map(|i| order[i % order.len()]).collect();
    let coords = indices.iter().map(|&i| coords[i]).collect();
    Ok(SampledCentroids { indices, coords })
}

/// Member indices of each centroid's neighborhood: the centroid in slot 0,
/// then points within `radius` in index order until `k` slots are filled,
/// padded with repeats of the centroid.
pub fn ball_query(coords: &[Point3], centroids: &SampledCentroids, radius: f64, k: usize) -> Vec<Vec<usize>> {
    centroids
        .indices
        .iter()
        .map(|&c| {
            let centre = coords[c];
            let mut members = Vec::with_capacity(k);
            members.push(c);
            for (i, p) in coords.iter().enumerate() {
                if members.len() >= k {
                    break;
                }
                if i != c && distance(p, &centre) <= radius {
                    members.push(i);
                }
            }
            members.resize(k.max(1), c);
            members
        })
        .collect()
}

/// One centroid and its `k` grouped neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub centroid_index: usize,
    pub member_indices: Vec<usize>,
    pub member_coords: Vec<Point3>,
    /// `k × C`, row-major.
    pub member_features: Tensor,
    pub radius: f64,
}

/// Groups `features` (`M × C`) around each centroid with [`ball_query`].
pub fn ball_query_group(
    coords: &[Point3],
    features: &Tensor,
    centroids: &SampledCentroids,
    radius: f64,
    k: usize,
) -> Result<Vec<Neighborhood>> {
    if features.rank() != 2 || features.shape()[0] != coords.len() {
        return Err(SpilError::Shape {
            op: "ball_query_group",
            lhs: vec![coords.len(), 3],
            rhs: features.shape().to_vec(),
        });
    }
    if !(radius > 0.0) || k == 0 {
        return Err(SpilError::Config(format!(
            "ball query needs radius > 0 and k >= 1, got radius={radius}, k={k}"
        )));
    }
    let c = features.shape()[1];
    Ok(ball_query(coords, centroids, radius, k)
        .into_iter()
        .zip(&centroids.indices)
        .map(|(members, &centroid)| {
            let mut data = Vec::with_capacity(k * c);
            for &m in &members {
                data.extend_from_slice(features.row(m));
            }
            Neighborhood {
                centroid_index: centroid,
                member_coords: members.iter().map(|&m| coords[m]).collect(),
                member_features: Tensor::new(vec![k, c], data).expect("k x c"),
                member_indices: members,
                radius,
            }
        })
        .collect())
}
