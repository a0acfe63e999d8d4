//! Segment a few recordings and assign them to train/val/test splits.

use std::sync::Arc;

use ampgan::audio::{assign_splits, segment_audio, SplitRatios};
use ampgan::toy::saw_bursts;

fn main() -> ampgan::Result<()> {
    let ids: Vec<String> = (0..12).map(|i| format!("take{i:02}")).collect();
    let splits = assign_splits(&ids, SplitRatios::default(), 1234, "crunch")?;
    for (id, split) in &splits {
        let buf = Arc::new(saw_bursts(1.5, id.len() as u64, id)?);
        let segs = segment_audio(&buf, 8192)?;
        println!("{id}  {:<5}  {} segments", format!("{split:?}"), segs.len());
    }
    let (train, val, test) = SplitRatios::default().counts(ids.len());
    println!("counts: train {train}, val {val}, test {test}");
    Ok(())
}
