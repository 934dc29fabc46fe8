//! The active Jacobian block never materializes a width × width matrix.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering::SeqCst};

use scalar_workbench::jsae::{jacobian, FfWeights};
use scalar_workbench::lm::{LmConfig, LmWeights, Segment};
use scalar_workbench::sae::{SaeConfig, SaeFamily, Variant};
use scalar_workbench::tensor::{RngState, Tensor};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let now = LIVE.fetch_add(layout.size(), SeqCst) + layout.size();
        PEAK.fetch_max(now, SeqCst);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size(), SeqCst);
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

#[test]
fn active_jacobian_memory_is_independent_of_width_squared() {
    let lm = LmConfig { n_layers: 1, d_model: 32, n_heads: 2, d_mlp: 128, context: 8, ..LmConfig::default() };
    let model = LmWeights::<f64>::init(&lm).unwrap();
    let mut rng = RngState::new(3);
    let x = Tensor::<f64>::randn([1, 32], 1.0, &mut rng);
    for seg in [Segment::FfLayer(0), Segment::FfBlock(0)] {
        let ff = FfWeights::of(&model, seg).unwrap();
        for expansion in [16usize, 64] {
            let k = 10;
            let cfg = SaeConfig { k, expansion, wide_expansion: expansion };
            let fam = SaeFamily::<f64>::new(Variant::TopkX8, &[seg.up(), seg.down()], 32, &cfg, 1).unwrap();
            let (sx, sy) = (fam.sae(0).unwrap(), fam.sae(1).unwrap());
            let width = sx.width;
            let code = sx.encode_row(x.row(0));
            assert_eq!(code.len(), k);

            let base = LIVE.load(SeqCst);
            PEAK.store(base, SeqCst);
            let j = jacobian(&sx, &sy, &ff, &code).unwrap();
            let extra = PEAK.load(SeqCst) - base;
            drop(j);

            // Vectors of length width, d_mlp or d, plus K columns and the K × K block.
            let (d, m) = (32usize, 128usize);
            let budget = 8 * (4 * (width + m + d) + 4 * k * (m + d) + 4 * k * k);
            assert!(extra <= budget, "{seg} width {width}: {extra} bytes > {budget}");
            assert!(extra * 50 < 8 * width * width, "{seg} width {width}: {extra} bytes");
        }
    }
}
