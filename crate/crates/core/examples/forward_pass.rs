//! One forward and backward pass of a small model on a generated batch.
//!
//! cargo run --example forward_pass

use omg_fuser::data::{collate, gen_samples, GenConfig, SampleRecord, SignalProfile};
use omg_fuser::train::{total_loss, LossWeights};
use omg_fuser::{Ctx, ModelConfig, OmgFuser, StreamSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> omg_fuser::Result<()> {
    let profiles = SignalProfile::parse_list("a:0.75,b:0.6")?;
    let recs = gen_samples(&GenConfig::new(16, 16, profiles, 1), 4)?;
    let cfg = ModelConfig::tiny(vec![StreamSpec::new("a", 1), StreamSpec::new("b", 1)]);
    let (model, store) = OmgFuser::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("{} parameter tensors, {} weights", store.len(), store.weight_count());

    let refs: Vec<&SampleRecord> = recs.iter().collect();
    let (batch, targets) = collate(&refs, &["a".into(), "b".into()], model.config.patch)?;
    let mut ctx = Ctx::new(&store, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = model.forward(&mut ctx, &batch, Some(&mut rng))?;
    println!("loc {:?}, det {:?}", ctx.g.shape(pred.loc), ctx.g.value(pred.det).data());
    let loss = total_loss(&mut ctx, &pred, &targets, LossWeights::default())?;
    println!("loss {:.4} (bBCE {:.4}, Dice {:.4}, det {:.4})", loss.value, loss.bbce, loss.dice, loss.det);
    ctx.g.backward(loss.total)?;
    let grads = ctx.param_grads();
    let norm: f32 = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v * v).sum::<f32>().sqrt();
    println!("gradients for {} tensors, global norm {norm:.4}", grads.len());
    Ok(())
}
