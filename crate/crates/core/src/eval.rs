//! Batched inference and dataset evaluation.

use crate::data::{collate, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{avg_fusion, score_sample, EvalReport, SampleScore};
use crate::model::OmgFuser;
use crate::params::{Ctx, ParamStore};

/// Localization map and detection score of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Output {
    pub loc: Vec<f32>,
    pub det: f32,
}

/// Something that maps a record to an [`Output`].
pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Output>>;
}

/// A trained network in eval mode.
pub struct ModelPredictor<'a> {
    pub model: &'a OmgFuser,
    pub store: &'a ParamStore<f32>,
    pub batch_size: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        "omg-fuser".into()
    }

    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Output>> {
        let streams: Vec<String> = self.model.config.streams.iter().map(|s| s.name.clone()).collect();
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(self.batch_size.max(1)) {
            let (batch, _) = collate(chunk, &streams, self.model.config.patch)?;
            let mut ctx = Ctx::new(self.store, false);
            let pred = self.model.forward(&mut ctx, &batch, None)?;
            let loc = ctx.g.value(pred.loc).data();
            let det = ctx.g.value(pred.det).data();
            let n = loc.len() / chunk.len();
            for (i, &d) in det.iter().enumerate() {
                out.push(Output { loc: loc[i * n..(i + 1) * n].to_vec(), det: d });
            }
        }
        Ok(out)
    }
}

/// Pixel-wise mean of the named signals; detection score is the map maximum.
pub struct AvgFusion {
    pub signals: Vec<String>,
}

/// One input signal used directly as a localization map.
pub struct SingleSignal(pub String);

fn signal_data<'r>(r: &'r SampleRecord, name: &str) -> Result<&'r [f32]> {
    let s = r.signal(name).ok_or_else(|| Error::Input(format!("{}: missing signal {name}", r.id)))?;
    if s.channels != 1 {
        return Err(Error::Input(format!("{}: signal {name} has {} channels, baselines need 1", r.id, s.channels)));
    }
    Ok(&s.data)
}

fn from_map(loc: Vec<f32>) -> Output {
    let det = loc.iter().copied().fold(0.0f32, f32::max);
    Output { loc, det }
}

impl Predictor for AvgFusion {
    fn name(&self) -> String {
        "avg-fusion".into()
    }

    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Output>> {
        records
            .iter()
            .map(|r| {
                let maps = self.signals.iter().map(|n| signal_data(r, n)).collect::<Result<Vec<_>>>()?;
                Ok(from_map(avg_fusion(&maps)?))
            })
            .collect()
    }
}

impl Predictor for SingleSignal {
    fn name(&self) -> String {
        format!("signal:{}", self.0)
    }

    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Output>> {
        records.iter().map(|r| Ok(from_map(signal_data(r, &self.0)?.to_vec()))).collect()
    }
}

/// Returns the ground truth itself; for checking the harness.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, records: &[&SampleRecord]) -> Result<Vec<Output>> {
        Ok(records
            .iter()
            .map(|r| Output { loc: r.loc.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), det: if r.det { 1.0 } else { 0.0 } })
            .collect())
    }
}

pub fn score_records(p: &dyn Predictor, records: &[&SampleRecord]) -> Result<Vec<SampleScore>> {
    if records.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let outs = p.predict(records)?;
    records.iter().zip(outs).map(|(r, o)| score_sample(r.id.clone(), &o.loc, &r.loc, o.det as f64)).collect()
}

/// Evaluates a predictor on named datasets.
pub fn evaluate(p: &dyn Predictor, datasets: &[(String, Vec<&SampleRecord>)]) -> Result<EvalReport> {
    let rows = datasets.iter().map(|(n, recs)| Ok((n.clone(), score_records(p, recs)?))).collect::<Result<Vec<_>>>()?;
    EvalReport::new(p.name(), rows)
}

/// Mean pixel-F1 at 0.5 of a predictor over records.
pub fn mean_pixel_f1(p: &dyn Predictor, records: &[&SampleRecord]) -> Result<f64> {
    let rows = score_records(p, records)?;
    Ok(rows.iter().map(|r| r.pixel_f1).sum::<f64>() / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_samples, GenConfig, SignalProfile};

    #[test]
    fn oracle_scores_perfectly() {
        let cfg = GenConfig::new(16, 16, SignalProfile::parse_list("a:0.7").unwrap(), 1);
        let recs = gen_samples(&cfg, 20).unwrap();
        let refs: Vec<&SampleRecord> = recs.iter().collect();
        let rep = evaluate(&OraclePredictor, &[("d".into(), refs)]).unwrap();
        let o = &rep.overall;
        assert_eq!((o.pixel_f1, o.pixel_f1_best_threshold, o.image_f1), (1.0, 1.0, 1.0));
        assert_eq!(o.pixel_auc, Some(1.0));
        assert_eq!(o.image_auc, Some(1.0));
    }

    #[test]
    fn evaluation_ignores_order() {
        let cfg = GenConfig::new(16, 16, SignalProfile::parse_list("a:0.7,b:0.5").unwrap(), 2);
        let recs = gen_samples(&cfg, 30).unwrap();
        let mut refs: Vec<&SampleRecord> = recs.iter().collect();
        let p = AvgFusion { signals: vec!["a".into(), "b".into()] };
        let a = evaluate(&p, &[("d".into(), refs.clone())]).unwrap().overall;
        refs.reverse();
        let b = evaluate(&p, &[("d".into(), refs)]).unwrap().overall;
        assert_eq!(a.samples, b.samples);
        assert!((a.pixel_f1 - b.pixel_f1).abs() < 1e-12);
        assert!((a.image_auc.unwrap() - b.image_auc.unwrap()).abs() < 1e-12);
    }
}
