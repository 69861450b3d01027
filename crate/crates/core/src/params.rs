//! Named parameter groups.
//!
//! Parameter structs are generic over their leaf type: `T = Matrix` holds
//! weights, `T = Var` holds the same weights bound onto a [`Tape`], and
//! gradients and optimizer moments reuse `T = Matrix`. The
//! [`param_group!`] macro generates the traversal methods that the
//! optimizer, checkpoint format and gradient checker rely on; traversal
//! order is declaration order.
//!
//! [`Tape`]: crate::tensor_math::Tape

use crate::tensor_math::{Matrix, Tape, Var};

pub(crate) fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

/// Field kind for a single tensor inside a [`param_group!`].
pub type Leaf<T> = T;

macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $(#[$fmeta:meta])* $field:ident : $kind:ident ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::tensor_math::Matrix> {
            $( $(#[$fmeta])* pub $field: $kind<T>, )*
        }

        impl<T> $name<T> {
            pub fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $( param_group!(@visit $kind, self.$field, &$crate::params::join(path, stringify!($field)), f); )*
            }

            pub fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $( param_group!(@visit_mut $kind, self.$field, &$crate::params::join(path, stringify!($field)), f); )*
            }

            pub fn map<U>(&self, path: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $( $field: param_group!(@map $kind, self.$field, &$crate::params::join(path, stringify!($field)), f), )*
                }
            }
        }
    };
    (@visit Leaf, $v:expr, $p:expr, $f:ident) => { $f($p, &$v) };
    (@visit $kind:ident, $v:expr, $p:expr, $f:ident) => { $v.visit($p, $f) };
    (@visit_mut Leaf, $v:expr, $p:expr, $f:ident) => { $f($p, &mut $v) };
    (@visit_mut $kind:ident, $v:expr, $p:expr, $f:ident) => { $v.visit_mut($p, $f) };
    (@map Leaf, $v:expr, $p:expr, $f:ident) => { $f($p, &$v) };
    (@map $kind:ident, $v:expr, $p:expr, $f:ident) => { $v.map($p, $f) };
}

pub(crate) use param_group;

param_group! {
    /// Multi-head attention with an output projection. Head `i` uses
    /// columns `[i·d_k, (i+1)·d_k)` of the query, key and value weights.
    pub struct AttentionParams {
        w_query: Leaf,
        w_key: Leaf,
        w_value: Leaf,
        w_out: Leaf,
        b_out: Leaf,
    }
}

param_group! {
    pub struct LayerNormParams {
        gamma: Leaf,
        beta: Leaf,
    }
}

param_group! {
    /// Two-layer position-wise network with a GELU in between.
    pub struct FeedForwardParams {
        w_in: Leaf,
        b_in: Leaf,
        w_out: Leaf,
        b_out: Leaf,
    }
}

impl<T: Clone> LayerNormParams<T> {
    pub fn leaves(&self) -> (T, T) {
        (self.gamma.clone(), self.beta.clone())
    }
}

/// Binds every leaf of a group onto `tape`.
pub trait Bind {
    type Bound;
    fn bind(&self, tape: &mut Tape) -> Self::Bound;
}

macro_rules! impl_bind {
    ($($name:ident),*) => {$(
        impl Bind for $name<Matrix> {
            type Bound = $name<Var>;
            fn bind(&self, tape: &mut Tape) -> $name<Var> {
                self.map("", &mut |_, m| tape.leaf(m.clone()))
            }
        }
    )*};
}

pub(crate) use impl_bind;

impl_bind!(AttentionParams, LayerNormParams, FeedForwardParams);
