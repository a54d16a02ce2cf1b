use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, DlspfError, Result};
use crate::rng::StreamRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
///
/// Parameters flagged `decay` take part in the L2 weight regularizer; biases and
/// normalization gains do not.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.decay.push(decay);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    pub fn is_decayed(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replaces every value by name; all names must be present and shapes must match.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(DlspfError::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.len()
            )));
        }
        for (name, t) in named {
            let id = *self
                .index
                .get(name)
                .ok_or_else(|| DlspfError::Format(format!("unexpected tensor {name}")))?;
            self.set(ParamId(id), t.clone())?;
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors()).collect()
    }

    /// Sum of squares of all decayed parameters.
    pub fn l2(&self) -> f64 {
        self.values.iter().zip(&self.decay).filter(|(_, d)| **d).map(|(v, _)| v.sq_norm()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Ctx<'t> {
        let params = self.values.iter().map(|v| tape.param(v.clone())).collect();
        Ctx { tape, params, decay: self.decay.clone(), dropout: None }
    }

    /// Like [`ParamStore::bind`] with a dropout stream for training.
    pub fn bind_train<'t>(&self, tape: &'t Tape, dropout_rng: Option<StreamRng>) -> Ctx<'t> {
        let mut ctx = self.bind(tape);
        ctx.dropout = dropout_rng.map(RefCell::new);
        ctx
    }
}

/// Parameters of one network bound to a tape.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    decay: Vec<bool>,
    dropout: Option<RefCell<StreamRng>>,
}

impl<'t> Ctx<'t> {
    /// Builds a context from externally created variables, in store order.
    pub fn from_vars(tape: &'t Tape, params: Vec<Var<'t>>, store: &ParamStore) -> Self {
        assert_eq!(params.len(), store.len());
        Ctx { tape, params, decay: store.decay.clone(), dropout: None }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.params
    }

    /// L2 regularizer as a tape expression.
    pub fn l2(&self) -> Result<Var<'t>> {
        let mut total = self.tape.constant(Tensor::scalar(0.0));
        for (p, d) in self.params.iter().zip(&self.decay) {
            if *d {
                total = total.add(p.square()?.sum()?)?;
            }
        }
        Ok(total)
    }

    /// Inverted dropout; identity when no dropout stream is attached or `rate == 0`.
    pub fn dropout(&self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        let Some(rng) = &self.dropout else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        x.mul(self.tape.constant(Tensor::new(&shape, mask)?))
    }
}
