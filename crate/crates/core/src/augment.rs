//! Stochastic graph views: edge dropping and column-wise feature masking.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Adjacency, GraphDataset, NormalizedAdjacency};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewAugment {
    pub edge_drop: f64,
    pub feature_mask: f64,
}

/// Per-view corruption probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub view1: ViewAugment,
    pub view2: ViewAugment,
}

impl AugmentConfig {
    pub fn none() -> Self {
        let clean = ViewAugment {
            edge_drop: 0.0,
            feature_mask: 0.0,
        };
        AugmentConfig {
            view1: clean,
            view2: clean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("view1.edge_drop", self.view1.edge_drop),
            ("view1.feature_mask", self.view1.feature_mask),
            ("view2.edge_drop", self.view2.edge_drop),
            ("view2.feature_mask", self.view2.feature_mask),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    /// Cora settings of the GRACE reference configuration.
    fn default() -> Self {
        AugmentConfig {
            view1: ViewAugment {
                edge_drop: 0.2,
                feature_mask: 0.3,
            },
            view2: ViewAugment {
                edge_drop: 0.4,
                feature_mask: 0.4,
            },
        }
    }
}

/// One corrupted view: normalised adjacency and masked features.
#[derive(Debug, Clone)]
pub struct GraphView<T> {
    pub adjacency: NormalizedAdjacency<T>,
    pub features: Array2<T>,
}

impl<T: Real> GraphView<T> {
    /// The uncorrupted graph.
    pub fn clean(g: &GraphDataset) -> Self {
        GraphView {
            adjacency: g.adjacency().normalized(),
            features: g.features().mapv(|x| T::lit(x as f64)),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

/// Removes each undirected edge independently with probability `p`.
pub fn drop_edges<R: Rng + ?Sized>(adj: &Adjacency, p: f64, rng: &mut R) -> Adjacency {
    let kept: Vec<(usize, usize)> = adj.edges().filter(|_| rng.random::<f64>() >= p).collect();
    Adjacency::from_edges(adj.num_nodes(), kept)
        .expect("subset of a valid edge set")
        .0
}

/// Draws the column keep-mask: `true` with probability `1 - p`.
pub fn feature_mask<R: Rng + ?Sized>(num_features: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..num_features).map(|_| rng.random::<f64>() >= p).collect()
}

pub fn apply_mask<T: Real>(x: &Array2<T>, keep: &[bool]) -> Array2<T> {
    assert_eq!(x.ncols(), keep.len());
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        Zip::from(&mut row).and(keep).for_each(|v, &k| {
            if !k {
                *v = T::zero();
            }
        });
    }
    out
}

/// Zeroes whole feature columns, each independently with probability `p`.
pub fn mask_features<T: Real, R: Rng + ?Sized>(x: &Array2<T>, p: f64, rng: &mut R) -> Array2<T> {
    let keep = feature_mask(x.ncols(), p, rng);
    apply_mask(x, &keep)
}

fn make_view<T: Real, R: Rng + ?Sized>(
    g: &GraphDataset,
    x: &Array2<T>,
    cfg: &ViewAugment,
    rng: &mut R,
) -> GraphView<T> {
    let adjacency = drop_edges(g.adjacency(), cfg.edge_drop, rng).normalized();
    let features = mask_features(x, cfg.feature_mask, rng);
    GraphView { adjacency, features }
}

/// Draws the two training views from one generator stream, view 1 first.
pub fn make_views<T: Real, R: Rng + ?Sized>(
    g: &GraphDataset,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (GraphView<T>, GraphView<T>) {
    let x = g.features().mapv(|v| T::lit(v as f64));
    make_views_from(g, &x, cfg, rng)
}

/// [`make_views`] with the feature matrix already converted to `T`.
pub fn make_views_from<T: Real, R: Rng + ?Sized>(
    g: &GraphDataset,
    x: &Array2<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (GraphView<T>, GraphView<T>) {
    let v1 = make_view(g, x, &cfg.view1, rng);
    let v2 = make_view(g, x, &cfg.view2, rng);
    (v1, v2)
}
