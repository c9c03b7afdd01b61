//! Pyramid pooling: multi-scale average pooling, nearest resize back to
//! the feature extent, concatenation with the input, 1x1 aggregation.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ConvGeometry, Element, Tape, Var};

use super::params::{ConvRef, ParamStore};
use super::spec::ppm_kernel;

#[derive(Clone, Debug)]
pub struct Ppm {
    pub channels: usize,
    pub levels: usize,
    pub aggregate: ConvRef,
}

/// Intermediate values of one pyramid pooling pass.
#[derive(Clone, Debug)]
pub struct PpmTrace {
    /// Pooled grids, level 0 first.
    pub pooled: Vec<Var>,
    /// `(levels + 1) * c_f` channels before aggregation.
    pub concat: Var,
    pub output: Var,
}

pub fn build_ppm<T: Element>(
    channels: usize,
    levels: usize,
    name: &str,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Ppm {
    let aggregate = ConvRef::create(
        store,
        &format!("{name}.aggregate"),
        (levels + 1) * channels,
        channels,
        1,
        ConvGeometry::pointwise(),
        rng,
    );
    Ppm {
        channels,
        levels,
        aggregate,
    }
}

impl Ppm {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var, bound: &[Var]) -> Result<PpmTrace> {
        let s = tape.shape(x);
        let mut pooled = Vec::with_capacity(self.levels);
        let mut branches = vec![x];
        for k in 0..self.levels {
            let (kh, kw) = (ppm_kernel(s.h, k), ppm_kernel(s.w, k));
            let p = tape.avg_pool2d(x, kh, kw, kh, kw)?;
            pooled.push(p);
            branches.push(tape.resize_nearest(p, s.h, s.w)?);
        }
        let concat = tape.concat_channels(&branches)?;
        let output = self.aggregate.apply(tape, concat, bound)?;
        Ok(PpmTrace {
            pooled,
            concat,
            output,
        })
    }
}
