//! Single-edit behaviour of the pretrained toy model (cached artifacts).

use kedit::editor::EditorConfig;
use kedit::exec::Exec;
use kedit::memi::{edit_update, gates_for_query, AdapterBank, EditConfig};
use kedit::model::{greedy_decode, Sequence};
use kedit::pipeline::{default_cache_dir, Artifacts, LabConfig};
use kedit::types::Modality;

#[test]
fn visual_edit_with_ten_steps_returns_the_new_entity() {
    let art = Artifacts::build(LabConfig::default(), Some(default_cache_dir()), Exec::Parallel).unwrap();
    let defaults = EditorConfig::default();
    assert_eq!((defaults.edit_steps, defaults.edit_lr), (10, 1e-2));

    let w = &art.pretrained.weights;
    let stream = art.test_stream(40, 0).unwrap();
    let mut hits = 0;
    let mut n = 0;
    for e in stream.iter().filter(|e| e.modality == Modality::Visual) {
        let mut bank = AdapterBank::dual(&w.config, e.index as u64);
        let prompt = art.kb.encode_query(&e.prompt).unwrap();
        let before = greedy_decode(w, Some(&bank), gates_for_query(e.prompt.qtype), &prompt, 4).unwrap();
        assert_ne!(art.kb.vocab.decode(&before), e.target);

        let seq = Sequence::new(prompt.clone(), &art.kb.answer_tokens(&e.target).unwrap());
        edit_update(w, &mut bank, e.prompt.qtype, &seq, &EditConfig { steps: 10, lr: 1e-2 }).unwrap();
        let after = greedy_decode(w, Some(&bank), gates_for_query(e.prompt.qtype), &prompt, 4).unwrap();
        hits += usize::from(art.kb.vocab.decode(&after) == e.target);
        n += 1;
    }
    // about four in five single edits land at this setting
    assert!(hits * 4 >= n * 3, "{hits}/{n} visual edits returned the new entity");
}
