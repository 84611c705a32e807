//! VLAD residual encoding of one slide against a frozen codebook.
//!
//! Every tile is hard-assigned to its nearest centroid, residuals are summed
//! per cluster in ascending tile-index order, the `K` blocks are
//! concatenated and the result is L2-normalized. Freshly encoded tiles enter
//! as graph rows and receive gradient; stale bank features are constants.
//! Assignment indices are never differentiated.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codebook::Codebook;
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::{BucketTerm, Graph, NodeId, Tensor, L2_EPS};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"DRSV";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VladConfig {
    /// Normalize each cluster block before the global normalization.
    pub intra_norm: bool,
}

/// Graph handles produced by [`encode_slide_graph`].
#[derive(Clone, Debug)]
pub struct VladNodes {
    /// `K × d` residual sums before any normalization.
    pub blocks: NodeId,
    /// Normalized flat descriptor of length `K·d`.
    pub flat: NodeId,
    /// The normalized descriptor viewed as `K` tokens of width `d`.
    pub tokens: NodeId,
    /// Cluster of each fresh row, in row order.
    pub fresh_assignments: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VladDescriptor {
    pub k: usize,
    pub d: usize,
    /// Concatenated blocks, cluster order `0..K`.
    pub flat: Vec<f64>,
    pub norm_applied: bool,
}

impl VladDescriptor {
    pub fn block(&self, k: usize) -> &[f64] {
        &self.flat[k * self.d..(k + 1) * self.d]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.flat.chunks_exact(self.d)
    }
}

enum Source<'a> {
    Fresh(usize),
    Stale(&'a [f32]),
}

/// Builds the descriptor into `g`.
///
/// `fresh` is an `r × d` node whose row `i` is the feature of tile
/// `fresh_indices[i]`; `stale` holds constant features by tile index.
pub fn encode_slide_graph(
    g: &mut Graph,
    cb: &Codebook,
    fresh_indices: &[u32],
    fresh: Option<NodeId>,
    stale: &[(u32, &[f32])],
    config: VladConfig,
) -> Result<VladNodes> {
    let d = cb.dim();
    let k = cb.k();
    let rows = match fresh {
        Some(f) => {
            let (r, c) = g.value(f).dims2();
            if c != d {
                return Err(Error::dim("vlad fresh features", &[r, d], g.shape(f)));
            }
            if r != fresh_indices.len() {
                return Err(Error::dim("vlad fresh indices", &[r], &[fresh_indices.len()]));
            }
            r
        }
        None => {
            if !fresh_indices.is_empty() {
                return Err(Error::Input("fresh indices without fresh features".into()));
            }
            0
        }
    };

    let mut order: BTreeMap<u32, Source<'_>> = BTreeMap::new();
    for (row, &idx) in fresh_indices.iter().enumerate() {
        if order.insert(idx, Source::Fresh(row)).is_some() {
            return Err(Error::Input(format!("duplicate tile index {idx}")));
        }
    }
    for (idx, feat) in stale {
        if feat.len() != d {
            return Err(Error::dim("vlad stale feature", &[d], &[feat.len()]));
        }
        if order.insert(*idx, Source::Stale(feat)).is_some() {
            return Err(Error::Input(format!("duplicate tile index {idx}")));
        }
    }

    let centroids = cb.centroids_f64();
    let mut fresh_assignments = vec![0; rows];
    let residual_rows = match fresh {
        Some(f) => {
            let values = g.value(f).clone();
            let mut sub = Vec::with_capacity(rows * d);
            for (i, a) in fresh_assignments.iter_mut().enumerate() {
                *a = cb.assign(values.row(i));
                sub.extend_from_slice(&centroids[*a]);
            }
            let c = g.constant(Tensor::new(vec![rows, d], sub)?)?;
            g.sub(f, c)?
        }
        None => g.constant(Tensor::zeros(&[1, d]))?,
    };

    let plan: Vec<BucketTerm> = order
        .values()
        .map(|src| match src {
            Source::Fresh(row) => BucketTerm::Row {
                row: *row,
                bucket: fresh_assignments[*row],
            },
            Source::Stale(feat) => {
                let f: Vec<f64> = feat.iter().map(|&x| f64::from(x)).collect();
                let bucket = cb.assign(&f);
                let values = f.iter().zip(&centroids[bucket]).map(|(x, c)| x - c).collect();
                BucketTerm::Const { bucket, values }
            }
        })
        .collect();

    let blocks = g.bucket_sum(residual_rows, k, &plan)?;
    let pre = if config.intra_norm {
        g.l2_normalize_rows(blocks, L2_EPS)?
    } else {
        blocks
    };
    let flat = g.reshape(pre, &[k * d])?;
    let flat = g.l2_normalize(flat, L2_EPS)?;
    let tokens = g.reshape(flat, &[k, d])?;
    Ok(VladNodes {
        blocks,
        flat,
        tokens,
        fresh_assignments,
    })
}

/// Unnormalized `K × d` residual sums for constant features.
pub fn residual_blocks(cb: &Codebook, tiles: &[(u32, &[f32])]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let nodes = encode_slide_graph(&mut g, cb, &[], None, tiles, VladConfig::default())?;
    Ok(g.value(nodes.blocks).data().to_vec())
}

/// Descriptor for constant features, outside any training graph.
pub fn encode_slide(
    cb: &Codebook,
    tiles: &[(u32, &[f32])],
    config: VladConfig,
) -> Result<VladDescriptor> {
    let mut g = Graph::new();
    let nodes = encode_slide_graph(&mut g, cb, &[], None, tiles, config)?;
    let flat = g.value(nodes.flat).data().to_vec();
    let norm_applied = flat.iter().any(|&x| x != 0.0);
    Ok(VladDescriptor {
        k: cb.k(),
        d: cb.dim(),
        flat,
        norm_applied,
    })
}

/// Writes `DRSV`: magic, `u32` K, `u32` d, then per slide a
/// length-prefixed id and `K·d` `f32` values.
pub fn write_descriptors(
    path: &Path,
    k: usize,
    d: usize,
    rows: &[(String, Vec<f32>)],
) -> Result<()> {
    let mut w = Writer::with_magic(DESCRIPTOR_MAGIC);
    w.u32(k as u32);
    w.u32(d as u32);
    for (id, v) in rows {
        if v.len() != k * d {
            return Err(Error::dim("descriptor", &[k * d], &[v.len()]));
        }
        w.str(id);
        for &x in v {
            w.f32(x);
        }
    }
    codec::write_atomic(path, &w.into_bytes())
}

pub type DescriptorFile = (usize, usize, Vec<(String, Vec<f32>)>);

pub fn read_descriptors(path: &Path) -> Result<DescriptorFile> {
    let bytes = codec::read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(DESCRIPTOR_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut rows = Vec::new();
    while !r.at_end() {
        let id = r.str()?;
        rows.push((id, r.f32s(k * d)?));
    }
    Ok((k, d, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cb(c: Vec<Vec<f32>>) -> Codebook {
        Codebook::from_centroids(c).unwrap()
    }

    #[test]
    fn hand_worked_example() {
        let cb = cb(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let f1 = [1.0f32, 0.0];
        let f2 = [0.0f32, 1.0];
        let blocks = residual_blocks(&cb, &[(0, &f1), (1, &f2)]).unwrap();
        assert_eq!(blocks, vec![0.0, 0.0, 0.0, 1.0]);
        let v = encode_slide(&cb, &[(0, &f1), (1, &f2)], VladConfig::default()).unwrap();
        assert_eq!(v.flat, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(v.block(1), &[0.0, 1.0]);
    }

    #[test]
    fn zero_residuals_give_zero_descriptor() {
        let cb = cb(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let v = encode_slide(&cb, &[(0, &a), (1, &b), (2, &a)], VladConfig::default()).unwrap();
        assert!(v.flat.iter().all(|&x| x == 0.0));
        assert!(!v.norm_applied);
    }

    #[test]
    fn duplicate_and_dim_errors() {
        let cb = cb(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = [1.0f32, 0.0];
        assert!(matches!(
            encode_slide(&cb, &[(0, &a), (0, &a)], VladConfig::default()),
            Err(Error::Input(_))
        ));
        let bad = [1.0f32, 0.0, 0.0];
        assert!(matches!(
            encode_slide(&cb, &[(0, &bad)], VladConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fresh_rows_get_gradient_stale_do_not() {
        let cb = cb(vec![vec![0.5, 0.5, 0.0], vec![-0.5, 0.0, 0.5]]);
        let stale = [[0.1f32, 0.9, 0.3], [-0.7, 0.1, 0.2]];
        let mut g = Graph::new();
        let fresh = g
            .param(Tensor::matrix(1, 3, vec![0.3, 0.2, -0.4]).unwrap())
            .unwrap();
        let stale_leaf = g
            .param(Tensor::matrix(2, 3, stale.iter().flatten().map(|&x| x as f64).collect()).unwrap())
            .unwrap();
        let nodes = encode_slide_graph(
            &mut g,
            &cb,
            &[1],
            Some(fresh),
            &[(0, &stale[0]), (2, &stale[1])],
            VladConfig::default(),
        )
        .unwrap();
        let loss = g.sum(nodes.flat).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(fresh).is_some());
        assert!(grads.get(stale_leaf).is_none());
    }

    #[test]
    fn no_fresh_tiles_means_constant_descriptor() {
        let cb = cb(vec![vec![0.5, 0.5], vec![-0.5, 0.0]]);
        let a = [0.1f32, 0.9];
        let mut g = Graph::new();
        let nodes =
            encode_slide_graph(&mut g, &cb, &[], None, &[(0, &a)], VladConfig::default()).unwrap();
        assert!(!g.requires_grad(nodes.flat));
    }

    #[test]
    fn intra_norm_flag() {
        let cb = cb(vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        let a = [3.0f32, 4.0];
        let b = [10.0f32, 10.5];
        let v = encode_slide(&cb, &[(0, &a), (1, &b)], VladConfig { intra_norm: true }).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expected = [0.6 * s, 0.8 * s, 0.0, s];
        for (x, e) in v.flat.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.drsv");
        let rows = vec![("a".to_string(), vec![0.5f32; 6]), ("b".to_string(), vec![-1.0; 6])];
        write_descriptors(&p, 2, 3, &rows).unwrap();
        assert_eq!(read_descriptors(&p).unwrap(), (2, 3, rows));
    }

    fn random_case(seed: u64) -> (Codebook, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..=4);
        let d = rng.gen_range(2..=8);
        let n = rng.gen_range(1..=20);
        let c = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        let tiles = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
        (cb(c), tiles)
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..10_000, rot in 0usize..20) {
            let (cb, tiles) = random_case(seed);
            let pairs: Vec<(u32, &[f32])> = tiles.iter().enumerate().map(|(i, t)| (i as u32, t.as_slice())).collect();
            let mut shuffled = pairs.clone();
            shuffled.rotate_left(rot % pairs.len());
            shuffled.reverse();
            let a = encode_slide(&cb, &pairs, VladConfig::default()).unwrap();
            let b = encode_slide(&cb, &shuffled, VladConfig::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn additive_before_normalization(seed in 0u64..10_000, split in 0usize..20) {
            let (cb, tiles) = random_case(seed);
            let pairs: Vec<(u32, &[f32])> = tiles.iter().enumerate().map(|(i, t)| (i as u32, t.as_slice())).collect();
            let cut = split % (pairs.len() + 1);
            let whole = residual_blocks(&cb, &pairs).unwrap();
            let left = residual_blocks(&cb, &pairs[..cut]).unwrap();
            let right = residual_blocks(&cb, &pairs[cut..]).unwrap();
            for ((w, l), r) in whole.iter().zip(&left).zip(&right) {
                prop_assert!((w - (l + r)).abs() < 1e-12);
            }
        }

        #[test]
        fn assignment_locally_constant(seed in 0u64..10_000) {
            let (cb, tiles) = random_case(seed);
            for t in &tiles {
                let f: Vec<f64> = t.iter().map(|&x| x as f64).collect();
                let k = cb.assign(&f);
                let nudged: Vec<f64> = f.iter().map(|x| x + 1e-12).collect();
                prop_assert_eq!(cb.assign(&nudged), k);
            }
        }
    }
}
