//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! holds tensors, graph handles (`Var`) or gradients. Traversal order is the
//! field declaration order and is stable, which the optimiser, the EMA and
//! the checkpoint format all rely on.

use crate::numerics::Tensor;

pub trait ParamTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T));

    fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Total scalar count of a tensor tree.
pub fn count_scalars<P: ParamTree<Tensor> + ?Sized>(p: &P) -> usize {
    p.leaves().iter().map(|t| t.len()).sum()
}

/// Declares a parameter struct whose fields are all leaves.
macro_rules! leaf_params {
    ($(#[$m:meta])* $vis:vis struct $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<T = $crate::numerics::Tensor> {
            $($(#[$fm])* pub $field: T),*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name { $($field: f(&$crate::params::join(prefix, stringify!($field)), &self.$field)),* }
            }
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
                $(f(&$crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

pub(crate) use leaf_params;
