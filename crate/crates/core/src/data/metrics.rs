use crate::error::{Error, Result};

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Per-class IoU; `None` for classes absent from both prediction and truth.
pub fn confusion_iou(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    if pred.is_empty() {
        return Err(Error::Input("mIoU of an empty set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Input(format!("{} predicted pixels for {} labelled", pred.len(), truth.len())));
    }
    let mut inter = vec![0usize; k];
    let mut pc = vec![0usize; k];
    let mut tc = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Input(format!("class id {} outside 0..{k}", p.max(t))));
        }
        pc[p] += 1;
        tc[t] += 1;
        if p == t {
            inter[p] += 1;
        }
    }
    Ok((0..k)
        .map(|c| {
            let union = pc[c] + tc[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect())
}

/// Mean IoU over the classes present in prediction or truth.
pub fn miou(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let ious: Vec<f64> = confusion_iou(pred, truth, k)?.into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let l = [0, 1, 2, 1];
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        assert_eq!(miou(&l, &l, 3).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let ious = confusion_iou(&[1, 1, 0, 0], &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(ious, vec![Some(0.0), Some(0.0), None]);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(accuracy(&[], &[]), Err(Error::Input(_))));
        assert!(matches!(miou(&[], &[], 2), Err(Error::Input(_))));
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Input(_))));
    }
}
