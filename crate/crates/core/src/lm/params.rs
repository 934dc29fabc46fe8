/// DynamicTanh parameters at one normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct DytParams<T> {
    pub alpha: T,
    pub gamma: T,
    pub beta: T,
}

/// One transformer block. Linear maps are stored `[out × in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1: DytParams<T>,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub norm2: DytParams<T>,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// The full parameter set, generic over the leaf type so the same layout
/// holds tensors, tape handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub wte: T,
    pub wpe: T,
    pub layers: Vec<LayerParams<T>>,
    pub norm_f: DytParams<T>,
    /// Unembedding, `[d_model × vocab]`.
    pub w_u: T,
}

impl<T> DytParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T)) {
        f(&format!("{prefix}.alpha"), &self.alpha);
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{prefix}.alpha"), &mut self.alpha);
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> DytParams<U> {
        DytParams {
            alpha: f(&format!("{prefix}.alpha"), &self.alpha),
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, w1, b1, w2, b2)
    };
}

impl<T> LayerParams<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T)) {
        self.norm1.visit(&format!("{p}.norm1"), f);
        macro_rules! each {
            ($($n:ident),*) => { $( f(&format!("{p}.{}", stringify!($n)), &self.$n); )* };
        }
        layer_fields!(each);
        self.norm2.visit(&format!("{p}.norm2"), f);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        self.norm1.visit_mut(&format!("{p}.norm1"), f);
        macro_rules! each {
            ($($n:ident),*) => { $( f(&format!("{p}.{}", stringify!($n)), &mut self.$n); )* };
        }
        layer_fields!(each);
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
    }

    fn map<U>(&self, p: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerParams<U> {
        // Field order matches `visit`.
        let norm1 = self.norm1.map(&format!("{p}.norm1"), f);
        macro_rules! build {
            ($($n:ident),*) => {{
                $( let $n = f(&format!("{p}.{}", stringify!($n)), &self.$n); )*
                let norm2 = self.norm2.map(&format!("{p}.norm2"), f);
                LayerParams { norm1, $($n,)* norm2 }
            }};
        }
        layer_fields!(build)
    }
}

impl<T> Params<T> {
    /// Visits every leaf with its dotted name, in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        f("wte", &self.wte);
        f("wpe", &self.wpe);
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{k}"), &mut f);
        }
        self.norm_f.visit("norm_f", &mut f);
        f("w_u", &self.w_u);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut T)) {
        f("wte", &mut self.wte);
        f("wpe", &mut self.wpe);
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{k}"), &mut f);
        }
        self.norm_f.visit_mut("norm_f", &mut f);
        f("w_u", &mut self.w_u);
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let wte = f("wte", &self.wte);
        let wpe = f("wpe", &self.wpe);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| l.map(&format!("layers.{k}"), &mut f))
            .collect();
        let norm_f = self.norm_f.map("norm_f", &mut f);
        let w_u = f("w_u", &self.w_u);
        Params {
            wte,
            wpe,
            layers,
            norm_f,
            w_u,
        }
    }

    /// Mutable references to every leaf, in canonical order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(|_, t| out.push(t));
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }
}
