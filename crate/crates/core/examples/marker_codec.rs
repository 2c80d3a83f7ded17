//! Insert markers into a word-aligned transcript, render it, then parse and
//! strip the markers again.
//!
//! ```text
//! cargo run --example marker_codec
//! ```

use timemark::codec::{insert_markers, parse_markers, strip_markers, AlignedTranscript, AlignedWord};

fn main() -> anyhow::Result<()> {
    let transcript = AlignedTranscript::new(
        "demo",
        vec![
            AlignedWord::new("Sure,", 0.0, 0.42),
            AlignedWord::new("the", 0.5, 0.61),
            AlignedWord::new("kettle", 0.61, 1.02),
            AlignedWord::new("is", 1.02, 1.15),
            AlignedWord::new("on.", 1.15, 1.58),
            AlignedWord::new("Give", 1.9, 2.1),
            AlignedWord::new("it", 2.1, 2.2),
            AlignedWord::new("a", 2.2, 2.26),
            AlignedWord::new("minute", 2.26, 2.71),
        ],
    );
    let augmented = insert_markers(&transcript)?;
    let text = augmented.render();
    println!("augmented: {text}");

    let (clean, markers) = parse_markers(&text);
    let times: Vec<f64> = markers.iter().map(|m| m.marker.seconds()).collect();
    println!("markers:   {times:?}");
    println!("clean:     {clean}");
    assert_eq!(strip_markers(&text), clean);
    Ok(())
}
