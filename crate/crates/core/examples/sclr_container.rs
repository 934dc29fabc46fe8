//! Writes tensors to an SCLR container, reads them back and shows that a
//! flipped byte is caught by the checksum.
//!
//!     cargo run --release --example sclr_container

use scalar_workbench::tensor::{RngState, Tensor};
use scalar_workbench::workbench::sclr;

fn main() -> anyhow::Result<()> {
    let mut rng = RngState::new(1);
    let w = Tensor::<f32>::randn([4, 3], 1.0, &mut rng);
    let b = Tensor::<f32>::randn([3], 1.0, &mut rng);
    let bytes = sclr::encode(&[("w".to_string(), &w), ("b".to_string(), &b)])?;
    println!("{} bytes, checksum {:016x}", bytes.len(), sclr::checksum(&bytes));

    let back = sclr::decode::<f32>(&bytes)?;
    for (name, t) in &back {
        println!("{name}: shape {:?}", t.shape());
    }
    assert_eq!(back[0].1, w);

    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x10;
    match sclr::decode::<f32>(&bad) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy rejected: {e}"),
    }

    let dir = std::env::temp_dir().join("sclr-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("weights.sclr");
    sclr::save(&path, &[("w".to_string(), &w)])?;
    println!("saved {}", path.display());
    Ok(())
}
