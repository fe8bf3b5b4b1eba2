//! Writes a two-record file in the CIFAR-10 binary layout, reads it back and
//! checks the bytes survive unchanged.

use amd_distill::data::{read_cifar_file, write_cifar_file, RawImages, CIFAR_RECORD};

fn main() -> amd_distill::Result<()> {
    let dir = std::env::temp_dir().join("amd-cifar-example");
    std::fs::create_dir_all(&dir).map_err(|e| amd_distill::Error::Data(e.to_string()))?;
    let path = dir.join("data_batch_1.bin");
    let raw = RawImages {
        pixels: (0..2 * 3072).map(|i| (i % 251) as u8).collect(),
        labels: vec![3, 8],
    };
    write_cifar_file(&path, &raw)?;
    let size = std::fs::metadata(&path).map_err(|e| amd_distill::Error::Data(e.to_string()))?.len();
    println!("{} bytes on disk, {} per record", size, CIFAR_RECORD);
    let back = read_cifar_file(&path, 2)?;
    println!("labels {:?}, pixels identical: {}", back.labels, back.pixels == raw.pixels);
    Ok(())
}
