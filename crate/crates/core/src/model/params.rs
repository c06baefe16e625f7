//! Flat parameter storage with named, shaped slots.

use crate::scalar::Scalar;
use crate::tensor::{View, ViewMut};

/// Identifier of one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All parameters of a model packed in one buffer, so the optimizer,
/// gradient checker and checkpoint code can treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    infos: Vec<ParamInfo>,
    pub data: Vec<S>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self { infos: Vec::new(), data: Vec::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: impl FnMut() -> S) -> ParamId {
        let offset = self.data.len();
        self.infos.push(ParamInfo { name: name.into(), rows, cols, offset });
        self.data.extend(std::iter::repeat_with(init).take(rows * cols));
        ParamId(self.infos.len() - 1)
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn slice(&self, id: ParamId) -> &[S] {
        &self.data[self.infos[id.0].range()]
    }

    #[inline]
    pub fn view(&self, id: ParamId) -> View<'_, S> {
        let info = &self.infos[id.0];
        View::new(&self.data[info.range()], info.rows, info.cols)
    }

    pub fn zeros_like(&self) -> Vec<S> {
        vec![S::zero(); self.data.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Whether decoupled weight decay should apply to the slot (matrices
    /// only; layer-norm gains and biases are exempt).
    pub fn decays(&self, id: usize) -> bool {
        let name = &self.infos[id].name;
        !(name.ends_with(".g") || name.ends_with(".b"))
    }
}

/// Mutable view of one parameter's gradient inside a flat gradient buffer.
#[inline]
pub fn grad_view<'a, S: Scalar>(grads: &'a mut [S], info: &ParamInfo) -> ViewMut<'a, S> {
    ViewMut::new(&mut grads[info.range()], info.rows, info.cols)
}
