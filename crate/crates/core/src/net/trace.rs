use crate::matrix::Matrix;

/// Per-sample statistics of one parametric layer, captured during backprop.
///
/// Sample `i` owns columns `[i·o, (i+1)·o)` of both matrices, one column per
/// spatial location (`o = 1` for dense layers). For a dense layer the columns
/// are `a_{l-1}^{(i)}` and `g_l^{(i)}`; for a conv layer they are the im2col
/// patches `â_p` and the pre-activation derivatives `ŭ_p`. With a homogeneous
/// bias the inputs carry a trailing constant-1 row.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub inputs: Matrix,
    pub grads: Matrix,
    pub locations: usize,
    pub samples: usize,
    pub is_conv: bool,
}

impl LayerTrace {
    pub fn in_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.grads.rows()
    }

    /// Dimension of the layer's Fisher block.
    pub fn block_dim(&self) -> usize {
        self.in_dim() * self.out_dim()
    }

    pub fn sample_inputs(&self, i: usize) -> Matrix {
        self.inputs.col_block(i * self.locations, self.locations)
    }

    pub fn sample_grads(&self, i: usize) -> Matrix {
        self.grads.col_block(i * self.locations, self.locations)
    }

    /// Column index of sample `i`, location `p`.
    #[inline]
    pub fn column(&self, i: usize, p: usize) -> usize {
        i * self.locations + p
    }

    /// `DW^{(i)} = Σ_p ŭ_p â_pᵀ`, accumulated in location order.
    pub fn sample_weight_grad(&self, i: usize) -> Matrix {
        let mut dw = Matrix::zeros(self.out_dim(), self.in_dim());
        for p in 0..self.locations {
            let c = self.column(i, p);
            let (a, g) = (self.inputs.col(c), self.grads.col(c));
            for (j, &aj) in a.iter().enumerate() {
                for (d, &gr) in dw.col_mut(j).iter_mut().zip(g) {
                    *d += gr * aj;
                }
            }
        }
        dw
    }

    /// Multiplies every pre-activation derivative by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        self.grads.scale_in_place(c);
    }
}

/// Everything one backward pass exposes to the Fisher estimators.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace {
    /// One entry per parametric layer.
    pub layers: Vec<LayerTrace>,
    /// `∇_{W_l} h`, the batch-mean weight gradient per parametric layer.
    pub mean_grads: Vec<Matrix>,
    /// Mean loss under the labels used for this pass.
    pub loss: f64,
}

impl BatchTrace {
    pub fn samples(&self) -> usize {
        self.layers.first().map_or(0, |l| l.samples)
    }
}
