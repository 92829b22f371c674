//! Cached forward passes and backward passes used by the trainers.

use ndarray::{Array2, Array3, ArrayView2};

use super::{accumulate, names, Branch, DetectorConfig, Detector, Gradients, RpnHead, BACKBONE_BLOCKS};
use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::nn::{self, ConvCache};

#[derive(Debug, Clone)]
struct BlockCache {
    conv: ConvCache,
    relu_out: Array3<f64>,
    pool: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
pub struct RpnCache {
    conv: ConvCache,
    hidden: Array3<f64>,
}

/// Activations of the two-layer RoI extractor.
#[derive(Debug, Clone)]
pub struct RoiCache {
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub f: Array2<f64>,
}

/// Which gradients [`Detector::roi_feature_backward`] should produce.
#[derive(Debug, Clone, Copy)]
pub struct RoiGradRequest {
    pub fc2: bool,
    pub fc1: bool,
    pub input: bool,
}

impl RoiGradRequest {
    pub const ALL: RoiGradRequest = RoiGradRequest {
        fc2: true,
        fc1: true,
        input: true,
    };
}

fn into_dyn<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::ArrayD<f64> {
    a.into_dyn()
}

impl Detector<'_> {
    pub fn backbone_forward_cached(&self, chw: &Array3<f64>) -> Result<(Array3<f64>, BackboneCache)> {
        let mut x = chw.clone();
        let mut blocks = Vec::with_capacity(BACKBONE_BLOCKS);
        for block in 0..BACKBONE_BLOCKS {
            let w = self.params.view4(&names::backbone_w(block))?;
            if w.dim().1 != x.dim().0 {
                return Err(Error::Dimension(format!(
                    "backbone block {} expects {} channels, got {}",
                    block + 1,
                    w.dim().1,
                    x.dim().0
                )));
            }
            let b = self.params.view1(&names::backbone_b(block))?;
            let (mut y, conv) = nn::conv3x3_forward(x.view(), w, b);
            nn::relu_inplace(&mut y);
            if DetectorConfig::pools_after_block(block) {
                let (pooled, arg) = nn::maxpool2_forward(y.view());
                blocks.push(BlockCache {
                    conv,
                    relu_out: y,
                    pool: Some(arg),
                });
                x = pooled;
            } else {
                blocks.push(BlockCache {
                    conv,
                    relu_out: y.clone(),
                    pool: None,
                });
                x = y;
            }
        }
        Ok((x, BackboneCache { blocks }))
    }

    pub fn backbone_backward(&self, cache: &BackboneCache, dz: Array3<f64>, grads: &mut Gradients) -> Result<()> {
        let mut d = dz;
        for (block, bc) in cache.blocks.iter().enumerate().rev() {
            let mut dy = match &bc.pool {
                Some(arg) => nn::maxpool2_backward(arg, bc.relu_out.dim(), d.view()),
                None => d,
            };
            nn::relu_backward(&bc.relu_out, &mut dy);
            let w = self.params.view4(&names::backbone_w(block))?;
            let (dx, dw, db) = nn::conv3x3_backward(&bc.conv, w, dy.view(), block > 0);
            accumulate(grads, names::backbone_w(block), into_dyn(dw));
            accumulate(grads, names::backbone_b(block), into_dyn(db));
            d = match dx {
                Some(dx) => dx,
                None => break,
            };
        }
        Ok(())
    }

    pub fn rpn_head_cached(&self, z: &Array3<f64>) -> Result<(RpnHead, RpnCache)> {
        let (c, fh, fw) = z.dim();
        if (fh, fw) != self.config.feature_size() || c != self.config.feature_channels() {
            return Err(Error::Dimension(format!("feature map {c}x{fh}x{fw} does not match configuration")));
        }
        let (mut hidden, conv) = nn::conv3x3_forward(
            z.view(),
            self.params.view4(names::RPN_CONV_W)?,
            self.params.view1(names::RPN_CONV_B)?,
        );
        nn::relu_inplace(&mut hidden);
        let r = hidden.dim().0;
        let cells = fh * fw;
        let flat = hidden.view().into_shape_with_order((r, cells)).expect("contiguous hidden");
        let obj = nn::linear_forward(flat.t(), self.params.view2(names::RPN_OBJ_W)?, Some(self.params.view1(names::RPN_OBJ_B)?));
        let del = nn::linear_forward(flat.t(), self.params.view2(names::RPN_DELTA_W)?, Some(self.params.view1(names::RPN_DELTA_B)?));
        let a = self.config.anchors_per_cell();
        let mut objectness = Vec::with_capacity(cells * a);
        let mut deltas = Vec::with_capacity(cells * a);
        for cell in 0..cells {
            for k in 0..a {
                objectness.push(obj[[cell, k]]);
                deltas.push([del[[cell, 4 * k]], del[[cell, 4 * k + 1]], del[[cell, 4 * k + 2]], del[[cell, 4 * k + 3]]]);
            }
        }
        Ok((RpnHead { objectness, deltas }, RpnCache { conv, hidden }))
    }

    /// Backpropagates RPN output gradients; returns the gradient w.r.t. the feature map.
    pub fn rpn_head_backward(
        &self,
        cache: &RpnCache,
        d_obj: &[f64],
        d_deltas: &[BoxDelta],
        grads: &mut Gradients,
    ) -> Result<Array3<f64>> {
        let (r, fh, fw) = cache.hidden.dim();
        let cells = fh * fw;
        let a = self.config.anchors_per_cell();
        let mut g_obj = Array2::<f64>::zeros((cells, a));
        let mut g_del = Array2::<f64>::zeros((cells, 4 * a));
        for cell in 0..cells {
            for k in 0..a {
                let idx = cell * a + k;
                g_obj[[cell, k]] = d_obj[idx];
                for q in 0..4 {
                    g_del[[cell, 4 * k + q]] = d_deltas[idx][q];
                }
            }
        }
        let flat = cache.hidden.view().into_shape_with_order((r, cells)).expect("contiguous hidden");
        let x = flat.t();
        let (dx_o, dw_o, db_o) = nn::linear_backward(x, self.params.view2(names::RPN_OBJ_W)?, g_obj.view());
        let (dx_d, dw_d, db_d) = nn::linear_backward(x, self.params.view2(names::RPN_DELTA_W)?, g_del.view());
        accumulate(grads, names::RPN_OBJ_W, into_dyn(dw_o));
        accumulate(grads, names::RPN_OBJ_B, into_dyn(db_o));
        accumulate(grads, names::RPN_DELTA_W, into_dyn(dw_d));
        accumulate(grads, names::RPN_DELTA_B, into_dyn(db_d));
        let dx = dx_o + dx_d; // (cells, r)
        let mut dh = dx.t().as_standard_layout().into_owned().into_shape_with_order((r, fh, fw)).expect("hidden shape");
        nn::relu_backward(&cache.hidden, &mut dh);
        let (dz, dw, db) = nn::conv3x3_backward(&cache.conv, self.params.view4(names::RPN_CONV_W)?, dh.view(), true);
        accumulate(grads, names::RPN_CONV_W, into_dyn(dw));
        accumulate(grads, names::RPN_CONV_B, into_dyn(db));
        Ok(dz.expect("requested dx"))
    }

    pub fn roi_feature_cached(&self, pooled: Array2<f64>, branch: Branch) -> Result<(Array2<f64>, RoiCache)> {
        self.require_branch(branch)?;
        let w1 = self.params.view2(&branch.fc_w(1))?;
        if pooled.ncols() != w1.ncols() {
            return Err(Error::Dimension(format!(
                "pooled width {} != fc1 input {}",
                pooled.ncols(),
                w1.ncols()
            )));
        }
        let mut h1 = nn::linear_forward(pooled.view(), w1, Some(self.params.view1(&branch.fc_b(1))?));
        nn::relu_inplace(&mut h1);
        let mut f = nn::linear_forward(h1.view(), self.params.view2(&branch.fc_w(2))?, Some(self.params.view1(&branch.fc_b(2))?));
        nn::relu_inplace(&mut f);
        Ok((f.clone(), RoiCache { input: pooled, h1, f }))
    }

    /// Gradients of the RoI extractor; returns `d pooled` when requested.
    pub fn roi_feature_backward(
        &self,
        cache: &RoiCache,
        df: Array2<f64>,
        branch: Branch,
        request: RoiGradRequest,
        grads: &mut Gradients,
    ) -> Result<Option<Array2<f64>>> {
        if !(request.fc1 || request.fc2 || request.input) {
            return Ok(None);
        }
        let mut d2 = df;
        nn::relu_backward(&cache.f, &mut d2);
        let w2 = self.params.view2(&branch.fc_w(2))?;
        let (mut dh1, dw2, db2) = nn::linear_backward(cache.h1.view(), w2, d2.view());
        if request.fc2 {
            accumulate(grads, branch.fc_w(2), into_dyn(dw2));
            accumulate(grads, branch.fc_b(2), into_dyn(db2));
        }
        if !(request.fc1 || request.input) {
            return Ok(None);
        }
        nn::relu_backward(&cache.h1, &mut dh1);
        let w1 = self.params.view2(&branch.fc_w(1))?;
        let (dx, dw1, db1) = nn::linear_backward(cache.input.view(), w1, dh1.view());
        if request.fc1 {
            accumulate(grads, branch.fc_w(1), into_dyn(dw1));
            accumulate(grads, branch.fc_b(1), into_dyn(db1));
        }
        Ok(request.input.then_some(dx))
    }

    /// Gradients of a classification head given `dlogits`; returns `df`.
    pub fn classify_backward(
        &self,
        f: ArrayView2<f64>,
        head: Branch,
        dlogits: ArrayView2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let w = self.params.view2(&head.cls_w())?;
        match self.config.classifier {
            super::ClassifierMode::Linear => {
                let (df, dw, db) = nn::linear_backward(f, w, dlogits);
                accumulate(grads, head.cls_w(), into_dyn(dw));
                accumulate(grads, head.cls_b(), into_dyn(db));
                Ok(df)
            }
            super::ClassifierMode::Cosine => {
                let (df, dw) = super::head::cosine_backward(f, w, self.config.cosine_scale, dlogits);
                accumulate(grads, head.cls_w(), into_dyn(dw));
                Ok(df)
            }
        }
    }

    /// Gradients of the regressor given `d raw`; returns `df`.
    pub fn regress_backward(&self, f: ArrayView2<f64>, draw: ArrayView2<f64>, grads: &mut Gradients) -> Result<Array2<f64>> {
        let (df, dw, db) = nn::linear_backward(f, self.params.view2(names::REG_W)?, draw);
        accumulate(grads, names::REG_W, into_dyn(dw));
        accumulate(grads, names::REG_B, into_dyn(db));
        Ok(df)
    }
}
