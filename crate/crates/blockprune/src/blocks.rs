//! Partition prunable weight tensors into contiguous blocks.
//!
//! A block is a tile of up to `bo` output channels by `bi` input channels at
//! one spatial kernel position. Kernel extents larger than 1x1 tile per
//! spatial position, so a conv layer (O,I,Kh,Kw) yields
//! `ceil(O/bo) * ceil(I/bi) * Kh * Kw` blocks. Non-divisible channel extents
//! produce smaller edge blocks rather than padded phantom weights: padding
//! would let a pruner "prune" weights that do not exist and miscount
//! sparsity.
//!
//! Block ordering is layer order, then output-channel-major within a layer,
//! and is stable across runs.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tensor};

/// Block tile extents. Kernel extents are fixed at 1x1: spatial positions
/// always tile individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub bo: usize,
    pub bi: usize,
    pub kh: usize,
    pub kw: usize,
}

impl BlockSpec {
    pub fn new(bo: usize, bi: usize) -> Result<Self> {
        if bo == 0 || bi == 0 {
            return Err(Error::InvalidArg(format!("block extents must be >= 1, got {bo}x{bi}")));
        }
        Ok(BlockSpec { bo, bi, kh: 1, kw: 1 })
    }
}

/// How a layer's weight elements are laid out in its flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightLayout {
    /// Conv weight stored (out, in, kh, kw) row-major.
    ConvOihw,
    /// Linear weight stored (in, out) row-major; `out` plays the
    /// output-channel role for blocking purposes.
    LinearIo,
}

/// One prunable weight tensor as seen by the partitioner.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub layout: WeightLayout,
    /// MACs each weight element contributes to one forward sample; used for
    /// the estimated MAC-reduction report.
    pub macs_per_weight: f64,
}

impl LayerDesc {
    pub fn conv(name: &str, out_ch: usize, in_ch: usize, kh: usize, kw: usize, macs: f64) -> Self {
        LayerDesc {
            name: name.into(),
            out_ch,
            in_ch,
            kh,
            kw,
            layout: WeightLayout::ConvOihw,
            macs_per_weight: macs,
        }
    }

    pub fn linear(name: &str, in_features: usize, out_features: usize) -> Self {
        LayerDesc {
            name: name.into(),
            out_ch: out_features,
            in_ch: in_features,
            kh: 1,
            kw: 1,
            layout: WeightLayout::LinearIo,
            macs_per_weight: 1.0,
        }
    }

    pub fn numel(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    /// Storage shape of the weight tensor this descriptor refers to.
    pub fn tensor_shape(&self) -> Vec<usize> {
        match self.layout {
            WeightLayout::ConvOihw => vec![self.out_ch, self.in_ch, self.kh, self.kw],
            WeightLayout::LinearIo => vec![self.in_ch, self.out_ch],
        }
    }
}

#[derive(Debug, Clone)]
struct LayerPartition {
    desc: LayerDesc,
    first_block: usize,
    /// Output-channel and input-channel tile counts.
    nob: usize,
    nib: usize,
}

impl LayerPartition {
    fn blocks(&self) -> usize {
        self.nob * self.nib * self.desc.kh * self.desc.kw
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Reduction {
    MeanAbs,
    L1,
    L2,
}

#[derive(Debug, Clone)]
pub struct BlockPartition {
    spec: BlockSpec,
    layers: Vec<LayerPartition>,
    n_blocks: usize,
    warnings: Vec<String>,
}

impl BlockPartition {
    pub fn new(layer_descs: Vec<LayerDesc>, spec: BlockSpec) -> Result<Self> {
        if layer_descs.is_empty() {
            return Err(Error::InvalidArg("partition needs at least one prunable layer".into()));
        }
        let mut layers = Vec::with_capacity(layer_descs.len());
        let mut warnings = Vec::new();
        let mut next = 0usize;
        for desc in layer_descs {
            if desc.numel() == 0 {
                return Err(Error::InvalidArg(format!("layer {} has no weights", desc.name)));
            }
            if spec.bo > desc.out_ch && spec.bi > desc.in_ch {
                warnings.push(format!(
                    "block spec {}x{} exceeds layer {} extents {}x{}; clamped to one block per spatial position",
                    spec.bo, spec.bi, desc.name, desc.out_ch, desc.in_ch
                ));
            }
            let lp = LayerPartition {
                nob: desc.out_ch.div_ceil(spec.bo),
                nib: desc.in_ch.div_ceil(spec.bi),
                first_block: next,
                desc,
            };
            next += lp.blocks();
            layers.push(lp);
        }
        Ok(BlockPartition { spec, layers, n_blocks: next, warnings })
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_desc(&self, layer: usize) -> &LayerDesc {
        &self.layers[layer].desc
    }

    pub fn layer_descs(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(|l| l.desc.clone()).collect()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn layer_of_block(&self, block: usize) -> usize {
        debug_assert!(block < self.n_blocks);
        match self
            .layers
            .binary_search_by(|l| l.first_block.cmp(&block))
        {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Global block index range of one layer.
    pub fn layer_block_range(&self, layer: usize) -> std::ops::Range<usize> {
        let l = &self.layers[layer];
        l.first_block..l.first_block + l.blocks()
    }

    /// Number of weight elements in a block (edge blocks are smaller).
    pub fn block_size(&self, block: usize) -> usize {
        let (layer, ob, ib, _) = self.decompose(block);
        let l = &self.layers[layer];
        let rows = (l.desc.out_ch - ob * self.spec.bo).min(self.spec.bo);
        let cols = (l.desc.in_ch - ib * self.spec.bi).min(self.spec.bi);
        rows * cols
    }

    fn decompose(&self, block: usize) -> (usize, usize, usize, usize) {
        let layer = self.layer_of_block(block);
        let l = &self.layers[layer];
        let local = block - l.first_block;
        let khkw = l.desc.kh * l.desc.kw;
        let p = local % khkw;
        let tile = local / khkw;
        let ib = tile % l.nib;
        let ob = tile / l.nib;
        (layer, ob, ib, p)
    }

    /// Visit the flat element indices (into the layer's weight buffer) of one
    /// block.
    pub fn for_each_elem(&self, block: usize, mut f: impl FnMut(usize)) {
        let (layer, ob, ib, p) = self.decompose(block);
        let l = &self.layers[layer];
        let d = &l.desc;
        let o0 = ob * self.spec.bo;
        let o1 = (o0 + self.spec.bo).min(d.out_ch);
        let i0 = ib * self.spec.bi;
        let i1 = (i0 + self.spec.bi).min(d.in_ch);
        match d.layout {
            WeightLayout::ConvOihw => {
                let (fh, fw) = (p / d.kw, p % d.kw);
                for o in o0..o1 {
                    for i in i0..i1 {
                        f(((o * d.in_ch + i) * d.kh + fh) * d.kw + fw);
                    }
                }
            }
            WeightLayout::LinearIo => {
                for o in o0..o1 {
                    for i in i0..i1 {
                        f(i * d.out_ch + o);
                    }
                }
            }
        }
    }

    fn check_weights(&self, weights: &[Tensor]) -> Result<()> {
        if weights.len() != self.layers.len() {
            return Err(Error::InvalidArg(format!(
                "partition has {} layers, got {} weight tensors",
                self.layers.len(),
                weights.len()
            )));
        }
        for (l, w) in self.layers.iter().zip(weights) {
            if w.numel() != l.desc.numel() {
                return Err(Error::InvalidArg(format!(
                    "layer {}: expected {} weights, got {}",
                    l.desc.name,
                    l.desc.numel(),
                    w.numel()
                )));
            }
        }
        Ok(())
    }

    /// One scalar per block under the chosen reduction.
    pub fn block_reduce(&self, weights: &[Tensor], red: Reduction) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        let mut out = vec![0.0; self.n_blocks];
        for (slot, value) in out.iter_mut().enumerate() {
            let layer = self.layer_of_block(slot);
            let data = weights[layer].data();
            let mut acc = 0.0;
            let mut count = 0usize;
            self.for_each_elem(slot, |e| {
                let w = data[e];
                acc += match red {
                    Reduction::MeanAbs | Reduction::L1 => w.abs(),
                    Reduction::L2 => w * w,
                };
                count += 1;
            });
            *value = match red {
                Reduction::MeanAbs => acc / count as f64,
                Reduction::L1 => acc,
                Reduction::L2 => acc.sqrt(),
            };
        }
        Ok(out)
    }

    /// Broadcast per-block scalars into per-layer multiplier tensors: each
    /// weight element's multiplier is its block's scalar.
    pub fn expand_mask(&self, block_values: &[f64]) -> Result<Vec<Tensor>> {
        if block_values.len() != self.n_blocks {
            return Err(Error::InvalidArg(format!(
                "expected {} block values, got {}",
                self.n_blocks,
                block_values.len()
            )));
        }
        let mut out: Vec<Tensor> = self
            .layers
            .iter()
            .map(|l| Tensor::zeros(l.desc.tensor_shape()))
            .collect();
        for (b, &v) in block_values.iter().enumerate() {
            let layer = self.layer_of_block(b);
            let data = out[layer].data_mut();
            self.for_each_elem(b, |e| data[e] = v);
        }
        Ok(out)
    }

    /// Sparsity accounting for a hard 0/1 mask. Block sparsity counts blocks;
    /// element sparsity counts weights (the two differ when edge blocks
    /// exist); MAC reduction weights each pruned element by its layer's
    /// per-element MAC count.
    pub fn sparsity_report(&self, hard_mask: &[f64]) -> Result<SparsityReport> {
        if hard_mask.len() != self.n_blocks {
            return Err(Error::InvalidArg(format!(
                "expected {} mask entries, got {}",
                self.n_blocks,
                hard_mask.len()
            )));
        }
        if let Some(bad) = hard_mask.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArg(format!(
                "hard mask must be binary, entry {bad} is {}",
                hard_mask[bad]
            )));
        }
        let mut zero_blocks = 0usize;
        let mut pruned_elems = 0usize;
        let mut total_elems = 0usize;
        let mut pruned_macs = 0.0;
        let mut total_macs = 0.0;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.iter().enumerate() {
            let range = self.layer_block_range(li);
            let mut layer_zeros = 0usize;
            for b in range.clone() {
                let size = self.block_size(b);
                total_elems += size;
                total_macs += size as f64 * l.desc.macs_per_weight;
                if hard_mask[b] == 0.0 {
                    layer_zeros += 1;
                    pruned_elems += size;
                    pruned_macs += size as f64 * l.desc.macs_per_weight;
                }
            }
            zero_blocks += layer_zeros;
            per_layer.push(LayerSparsity {
                name: l.desc.name.clone(),
                blocks: range.len(),
                zero_blocks: layer_zeros,
                block_sparsity: layer_zeros as f64 / range.len() as f64,
            });
        }
        Ok(SparsityReport {
            total_blocks: self.n_blocks,
            zero_blocks,
            block_sparsity: zero_blocks as f64 / self.n_blocks as f64,
            element_sparsity: pruned_elems as f64 / total_elems as f64,
            mac_reduction: pruned_macs / total_macs,
            per_layer,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSparsity {
    pub name: String,
    pub blocks: usize,
    pub zero_blocks: usize,
    pub block_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub total_blocks: usize,
    pub zero_blocks: usize,
    pub block_sparsity: f64,
    pub element_sparsity: f64,
    pub mac_reduction: f64,
    pub per_layer: Vec<LayerSparsity>,
}

/// Tape node broadcasting block scalars to one layer's multiplier tensor.
/// Backward block-sums the upstream gradient back into block space, which is
/// exactly the per-block inner-product reduction the mask gradient needs.
#[derive(Debug)]
pub struct BlockExpandOp {
    pub partition: Rc<BlockPartition>,
    pub layer: usize,
}

impl BlockExpandOp {
    pub fn node(partition: Rc<BlockPartition>, layer: usize) -> Rc<dyn CustomOp> {
        Rc::new(BlockExpandOp { partition, layer })
    }
}

impl CustomOp for BlockExpandOp {
    fn name(&self) -> &'static str {
        "block_expand"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let f = inputs[0];
        if f.numel() != self.partition.n_blocks() {
            return Err(Error::InvalidArg(format!(
                "block_expand: expected {} block values, got {}",
                self.partition.n_blocks(),
                f.numel()
            )));
        }
        let desc = self.partition.layer_desc(self.layer);
        let mut out = Tensor::zeros(desc.tensor_shape());
        for b in self.partition.layer_block_range(self.layer) {
            let v = f.data()[b];
            let data = out.data_mut();
            self.partition.for_each_elem(b, |e| data[e] = v);
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = vec![0.0; inputs[0].numel()];
        for b in self.partition.layer_block_range(self.layer) {
            let mut acc = 0.0;
            self.partition.for_each_elem(b, |e| acc += upstream.data()[e]);
            g[b] = acc;
        }
        Ok(vec![Tensor::from_vec(g)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(o: usize, i: usize, kh: usize, kw: usize, bo: usize, bi: usize) -> BlockPartition {
        BlockPartition::new(
            vec![LayerDesc::conv("conv", o, i, kh, kw, 1.0)],
            BlockSpec::new(bo, bi).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn block_counts() {
        assert_eq!(one_layer(16, 8, 1, 1, 16, 8).n_blocks(), 1);
        assert_eq!(one_layer(32, 16, 3, 3, 16, 8).n_blocks(), 36);
        assert_eq!(one_layer(20, 12, 1, 1, 16, 8).n_blocks(), 4);
    }

    #[test]
    fn edge_block_sizes() {
        // (20,12) under 16x8 tiles: 16x8, 16x4, 4x8, 4x4 in ob-major order.
        let p = one_layer(20, 12, 1, 1, 16, 8);
        let sizes: Vec<usize> = (0..4).map(|b| p.block_size(b)).collect();
        assert_eq!(sizes, vec![128, 64, 32, 16]);
    }

    #[test]
    fn partition_is_a_bijection() {
        // Enumeration oracle: every element of every layer is visited exactly
        // once across all blocks.
        let p = BlockPartition::new(
            vec![
                LayerDesc::conv("c1", 20, 12, 3, 3, 4.0),
                LayerDesc::linear("fc", 10, 7),
            ],
            BlockSpec::new(16, 8).unwrap(),
        )
        .unwrap();
        for layer in 0..p.n_layers() {
            let mut seen = vec![0usize; p.layer_desc(layer).numel()];
            for b in p.layer_block_range(layer) {
                p.for_each_elem(b, |e| seen[e] += 1);
            }
            assert!(seen.iter().all(|&c| c == 1), "layer {layer} coverage {seen:?}");
        }
    }

    #[test]
    fn reduce_matches_naive_loop() {
        let p = one_layer(2, 2, 1, 1, 2, 2);
        let w = Tensor::new(vec![2, 2, 1, 1], vec![3.0, -4.0, 0.0, 0.0]).unwrap();
        let l1 = p.block_reduce(std::slice::from_ref(&w), Reduction::L1).unwrap();
        let l2 = p.block_reduce(std::slice::from_ref(&w), Reduction::L2).unwrap();
        let ma = p.block_reduce(std::slice::from_ref(&w), Reduction::MeanAbs).unwrap();
        assert_eq!(l1[0], 7.0);
        assert_eq!(l2[0], 5.0);
        assert_eq!(ma[0], 1.75);

        // block [3,-4] alone
        let p2 = one_layer(1, 2, 1, 1, 1, 2);
        let w2 = Tensor::new(vec![1, 2, 1, 1], vec![3.0, -4.0]).unwrap();
        assert_eq!(p2.block_reduce(std::slice::from_ref(&w2), Reduction::L1).unwrap()[0], 7.0);
        assert_eq!(p2.block_reduce(std::slice::from_ref(&w2), Reduction::L2).unwrap()[0], 5.0);
        assert_eq!(p2.block_reduce(std::slice::from_ref(&w2), Reduction::MeanAbs).unwrap()[0], 3.5);
    }

    #[test]
    fn zero_block_reduces_to_zero() {
        let p = one_layer(4, 4, 1, 1, 4, 4);
        let w = Tensor::zeros(vec![4, 4, 1, 1]);
        for red in [Reduction::MeanAbs, Reduction::L1, Reduction::L2] {
            assert_eq!(p.block_reduce(std::slice::from_ref(&w), red).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn reduce_against_elementwise_oracle_random() {
        let mut rng = crate::rng::Rng::new(17);
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", 7, 5, 2, 2, 1.0)],
            BlockSpec::new(3, 2).unwrap(),
        )
        .unwrap();
        let desc = p.layer_desc(0).clone();
        let data: Vec<f64> = (0..desc.numel()).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let w = Tensor::new(desc.tensor_shape(), data.clone()).unwrap();
        let got = p.block_reduce(std::slice::from_ref(&w), Reduction::L1).unwrap();
        // Naive oracle: walk every element of the tensor, find its block by
        // direct coordinate arithmetic.
        let mut want = vec![0.0; p.n_blocks()];
        let (bo, bi) = (3usize, 2usize);
        let nib = desc.in_ch.div_ceil(bi);
        let khkw = desc.kh * desc.kw;
        for o in 0..desc.out_ch {
            for i in 0..desc.in_ch {
                for fh in 0..desc.kh {
                    for fw in 0..desc.kw {
                        let flat = ((o * desc.in_ch + i) * desc.kh + fh) * desc.kw + fw;
                        let block = ((o / bo) * nib + i / bi) * khkw + fh * desc.kw + fw;
                        want[block] += data[flat].abs();
                    }
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn expand_basics() {
        let p = one_layer(2, 2, 1, 1, 2, 2);
        let mult = p.expand_mask(&[0.5]).unwrap();
        assert_eq!(mult[0].data(), &[0.5; 4]);
        assert!(p.expand_mask(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn binary_expand_zero_count() {
        let p = one_layer(20, 12, 1, 1, 16, 8);
        let mask = [1.0, 0.0, 0.0, 1.0];
        let mult = p.expand_mask(&mask).unwrap();
        let zeros = mult[0].data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, p.block_size(1) + p.block_size(2));
    }

    #[test]
    fn expand_then_reduce_is_identity() {
        let mut rng = crate::rng::Rng::new(23);
        let p = BlockPartition::new(
            vec![
                LayerDesc::conv("c", 5, 3, 2, 1, 1.0),
                LayerDesc::linear("fc", 6, 4),
            ],
            BlockSpec::new(2, 2).unwrap(),
        )
        .unwrap();
        let v: Vec<f64> = (0..p.n_blocks()).map(|_| rng.uniform(0.0, 3.0)).collect();
        let mult = p.expand_mask(&v).unwrap();
        let back = p.block_reduce(&mult, Reduction::MeanAbs).unwrap();
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sparsity_counts() {
        let p = one_layer(10, 1, 1, 1, 1, 1);
        let mut mask = vec![1.0; 10];
        for slot in mask.iter_mut().take(5) {
            *slot = 0.0;
        }
        let rep = p.sparsity_report(&mask).unwrap();
        assert_eq!(rep.block_sparsity, 0.5);
        assert_eq!(rep.zero_blocks, 5);

        let all_ones = p.sparsity_report(&vec![1.0; 10]).unwrap();
        assert_eq!(all_ones.block_sparsity, 0.0);
        assert_eq!(all_ones.mac_reduction, 0.0);

        assert!(p.sparsity_report(&vec![0.5; 10]).is_err());
    }

    #[test]
    fn edge_block_element_sparsity_matches_count_oracle() {
        let p = one_layer(20, 12, 1, 1, 16, 8);
        // Prune the two edge blocks on the input side: blocks 1 (16x4) and 3 (4x4).
        let rep = p.sparsity_report(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let pruned = 64 + 16;
        assert_eq!(rep.element_sparsity, pruned as f64 / 240.0);
        assert_eq!(rep.block_sparsity, 0.5);
    }

    #[test]
    fn oversized_spec_warns_and_clamps() {
        let p = one_layer(4, 4, 1, 1, 16, 8);
        assert_eq!(p.n_blocks(), 1);
        assert_eq!(p.warnings().len(), 1);
        assert!(p.warnings()[0].contains("exceeds"), "{:?}", p.warnings());
    }
}
