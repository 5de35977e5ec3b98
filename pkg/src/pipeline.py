import logging
import os
from dataclasses import replace

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from src.adaptation import (
    PrototypeBank, PseudoLabel, correct_pseudo_labels, initialize_bank, normalize_features, pair_two_way,
    pool_to_grid, similarity_matrix, update_bank, warmup_pseudo_labels,
)
from src.augment import augment, restore
from src.autograd import Tape, Tensor, no_tape
from src.consts import (
    ADAPTED_CHECKPOINT, CORRECTED_LABEL_DIR, PAIRS_FILE, PSEUDO_LABEL_DIR, REPORT_FILE, TRAINING_LOG,
    WARMUP_CHECKPOINT,
)
from src.helpers.model import build_discriminator, load_checkpoint, predict_labels, predict_paired_labels, save_checkpoint
from src.helpers.pipeline import load_pseudo_labels, read_pairs, save_pseudo_labels, write_pairs
from src.helpers.plots import plot_overlay, plot_training_log
from src.model import QuadFormer
from src.objectives import discriminator_loss, generator_loss, seg_cross_entropy, total_loss
from src.optim import OptimState, optimizer_step
from src.utils.common import make_sure_dir_exists
from src.utils.errors import ContractError
from src.utils.metrics import cumulative_iou, iou
from src.utils.pnm import write_label


logger = logging.getLogger('pladapt.pipeline')

WARMUP_PHASE = 0
ADAPT_PHASE = 1
LOG_COLUMNS = ['step', 'l_seg_s', 'l_seg_t', 'd_loss', 'g_loss', 'lr', 'target_iou']


def _mean(losses):
    return sum(losses) * (1.0 / len(losses)) if losses else 0.0


def _value(x):
    return x.item() if isinstance(x, Tensor) else float(x)


class Pipeline:
    def __init__(self, config, dataset):
        self.config = config
        self.dataset = dataset
        self.model = QuadFormer.from_config(config)
        self.discriminator = build_discriminator(config)
        if config.source_val_fraction > 0:
            self.train_keys, self.val_keys = train_test_split(
                dataset.source_keys, test_size=config.source_val_fraction, random_state=config.seed,
            )
        else:
            self.train_keys, self.val_keys = list(dataset.source_keys), []
        self.opt_g = None
        self.opt_d = None
        self.bank = None
        self.pseudo_labels = None
        self.pairs = None
        self.log = []
        self._images = {}
        self._labels = {}

    # data access

    def image(self, key):
        if key not in self._images:
            self._images[key] = self.dataset.image(key)
        return self._images[key]

    def label(self, key):
        if key not in self._labels:
            self._labels[key] = self.dataset.label(key)
        return self._labels[key]

    def _step_rng(self, phase, step):
        return np.random.default_rng([self.config.seed, phase, step])

    def _path(self, name):
        return os.path.join(self.config.output_dir, name)

    # training

    def _apply(self, tape, loss, params, state):
        grads = tape.backward(loss)
        return optimizer_step(params, {name: grads[tensor] for name, tensor in params}, state)

    def warmup(self, resume=None):
        """Source-only training of the self-attention path, then warm-up pseudo labels."""
        config = self.config
        iterations = config.warmup_iterations
        self.opt_g = OptimState(config.lr, config.weight_decay, min(config.warmup_steps, iterations), iterations)
        start = self.restore(resume) if resume else 0
        params = self.model.parameters()

        for step in tqdm(range(start, iterations), desc='warm-up', initial=start, total=iterations):
            rng = self._step_rng(WARMUP_PHASE, step)
            with Tape() as tape:
                losses = []
                for i in rng.choice(len(self.train_keys), size=config.batch_size):
                    key = self.train_keys[i]
                    view = augment(self.image(key), self.label(key), rng, config.crop_size)
                    mask = self.model.forward_single(Tensor(view.image), domain='source')
                    loss, _ = seg_cross_entropy(mask, view.label, class_weights=config.class_weights)
                    losses.append(loss)
                loss = _mean(losses)
            lr = self._apply(tape, loss, params, self.opt_g)
            self._record(step, iterations, WARMUP_CHECKPOINT, l_seg_s=loss.item(), lr=lr)

        self.model.sync_heads()
        self.save(WARMUP_CHECKPOINT, iterations)
        source_iou = self.evaluate_iou(self.val_keys) if self.val_keys else float('nan')
        target_iou = self.evaluate_iou(self.dataset.target_val_keys)
        logger.info('warm-up done: source-val IoU %.4f, target-val IoU %.4f', source_iou, target_iou)

        self.pseudo_labels = warmup_pseudo_labels(
            self.model, [(k, Tensor(self.image(k))) for k in self.dataset.target_train_keys], config.tau,
        )
        save_pseudo_labels(self.pseudo_labels, self._path(PSEUDO_LABEL_DIR))
        self.pseudo_label_diagnostics('warm-up')
        self.save_log()
        return {'source_val_iou': source_iou, 'target_val_iou': target_iou}

    def pair(self, pairs_path=None, out_path=None):
        if pairs_path:
            self.pairs = read_pairs(pairs_path, self.dataset)
            self._check_pairs(pairs_path)
        else:
            self.pairs = pair_two_way(
                self.dataset.images(self.train_keys), self.dataset.images(self.dataset.target_train_keys),
                two_way=self.config.two_way_pairing,
            )
        out_path = out_path or self._path(PAIRS_FILE)
        make_sure_dir_exists(os.path.dirname(os.path.abspath(out_path)))
        write_pairs(self.pairs, out_path)
        return self.pairs

    def _check_pairs(self, pairs_path):
        """Loaded pairs may only use source-train and target-train images."""
        splits = (('source', set(self.train_keys), 'source training'),
                  ('target', set(self.dataset.target_train_keys), 'target training'))
        for p in self.pairs:
            for side, allowed, split in splits:
                key = getattr(p, side)
                if key not in allowed:
                    raise ContractError(f'{pairs_path}: {side} {key!r} is not a {split} image')

    def adapt(self, warmup_ckpt, pairs_path=None, pseudo_dir=None, resume=None):
        """Cross-domain retraining with pseudo labels, label correction and output-space alignment."""
        config = self.config
        arrays, _ = load_checkpoint(warmup_ckpt)
        self.model.load_state(arrays)
        if config.self_training:
            pseudo_dir = pseudo_dir or os.path.join(os.path.dirname(os.path.abspath(warmup_ckpt)), PSEUDO_LABEL_DIR)
            self.pseudo_labels = load_pseudo_labels(
                self.dataset.target_train_keys, pseudo_dir, config.num_classes, config.tau,
            )
        self.pair(pairs_path)
        if not len(self.pairs):
            raise ContractError('adaptation needs at least one source/target pair')

        iterations = config.iterations
        warm = min(config.warmup_steps, iterations)
        self.opt_g = OptimState(config.lr, config.weight_decay, warm, iterations)
        self.opt_d = OptimState(config.disc_lr, config.weight_decay, warm, iterations)
        dim = 2 * len(config.channels) * config.embed_dim
        self.bank = PrototypeBank.zeros(config.num_classes, dim, config.ema_momentum)
        correcting = config.self_training and config.label_correction
        if resume:
            start = self.restore(resume)
        else:
            start = 0
            if correcting:
                self.bank = self.initialize_bank()

        for step in tqdm(range(start, iterations), desc='adapt', initial=start, total=iterations):
            row = self.adapt_step(step, correcting)
            self._record(step, iterations, ADAPTED_CHECKPOINT, **row)

        self.save(ADAPTED_CHECKPOINT, iterations)
        if self.pseudo_labels is not None:
            save_pseudo_labels(self.pseudo_labels, self._path(CORRECTED_LABEL_DIR))
            self.pseudo_label_diagnostics('adapted')
        self.save_log()
        target_iou = self.evaluate_iou(self.dataset.target_val_keys)
        logger.info('adaptation done: target-val IoU %.4f', target_iou)
        return {'target_val_iou': target_iou}

    def initialize_bank(self):
        """One full pass over the target training images with the current pseudo labels."""
        partner = {}
        for p in self.pairs:
            partner.setdefault(p.target, p.source)
        batches = []
        with no_tape():
            for key in tqdm(self.dataset.target_train_keys, desc='prototypes', leave=False):
                label = self.pseudo_labels[key]
                img_t = Tensor(self.image(key))
                if key in partner:
                    _, mask_t = self.model.forward(Tensor(self.image(partner[key])), img_t)
                else:
                    mask_t = self.model.forward_single(img_t, domain='target')
                h, w = mask_t.logits.shape[1:]
                batches.append((normalize_features(mask_t.features.data), pool_to_grid(label.probs * label.valid, h, w)))
        return initialize_bank(self.bank, batches)

    def _target_view(self, pair, rng):
        image = self.image(pair.target)
        if self.pseudo_labels is None:
            return augment(image, None, rng, self.config.crop_size)
        label = self.pseudo_labels[pair.target]
        return augment(image, label.labels, rng, self.config.crop_size,
                       extras={'probs0': label.probs0, 'probs': label.probs})

    def adapt_step(self, step, correcting):
        config = self.config
        rng = self._step_rng(ADAPT_PHASE, step)
        batch = [self.pairs.pairs[i] for i in rng.choice(len(self.pairs), size=config.batch_size)]
        views = [(p, augment(self.image(p.source), self.label(p.source), rng, config.crop_size),
                  self._target_view(p, rng)) for p in batch]
        bank = self.bank
        bank_updates = []
        row = {}

        with Tape() as tape:
            outputs = []
            for _, src, tgt in views:
                mask_s, mask_t = self.model.forward(Tensor(src.image), Tensor(tgt.image))
                size = src.image.shape[1:]
                outputs.append((mask_s, mask_t, mask_s.probs(*size), mask_t.probs(*size)))

            if config.adversarial:
                d_params = self.discriminator.named_parameters()
                with Tape() as d_tape:
                    d_loss = _mean([discriminator_loss(ps, pt, self.discriminator) for _, _, ps, pt in outputs])
                self._apply(d_tape, d_loss, d_params, self.opt_d)
                row['d_loss'] = d_loss.item()

            seg_s, seg_t, adv = [], [], []
            for (pair, src, tgt), (mask_s, mask_t, _, probs_t) in zip(views, outputs):
                loss, _ = seg_cross_entropy(mask_s, src.label, class_weights=config.class_weights)
                seg_s.append(loss)
                if self.pseudo_labels is not None:
                    probs = tgt.extras['probs']
                    view = PseudoLabel(tgt.extras['probs0'], probs, probs.max(axis=0) >= config.tau)
                    if correcting:
                        view = self._correct(pair, tgt, mask_t, view, bank, bank_updates)
                    loss, empty = seg_cross_entropy(mask_t, view.labels, view.valid, config.class_weights)
                    if not empty:
                        seg_t.append(loss)
                if config.adversarial:
                    adv.append(generator_loss(probs_t, self.discriminator))

            l_seg_s, l_seg_t, g_loss = _mean(seg_s), _mean(seg_t), _mean(adv)
            beta1 = config.beta1 if config.self_training else 0.0
            beta2 = config.beta2 if config.adversarial else 0.0
            loss = total_loss(l_seg_s, l_seg_t, g_loss, beta1, beta2)
        row['lr'] = self._apply(tape, loss, self.model.parameters(), self.opt_g)

        for features, probs in bank_updates:
            self.bank = update_bank(self.bank, features, probs)
        row['l_seg_s'] = _value(l_seg_s)
        if self.pseudo_labels is not None:
            row['l_seg_t'] = _value(l_seg_t)
        if config.adversarial:
            row['g_loss'] = _value(g_loss)
        return row

    def _correct(self, pair, tgt, mask_t, view, bank, bank_updates):
        """Correct the crop against the step's bank snapshot and write it back into the full label."""
        features = normalize_features(mask_t.features.data)
        h, w = mask_t.logits.shape[1:]
        view = correct_pseudo_labels(view, features, (h, w), bank, self.config.temperature, self.config.tau)
        bank_updates.append((features, pool_to_grid(view.probs * view.valid, h, w)))

        full = self.pseudo_labels[pair.target]
        probs = restore(view.probs, full.probs, tgt.transform)
        self.pseudo_labels[pair.target] = replace(
            full, probs=probs, valid=probs.max(axis=0) >= self.config.tau, provenance='corrected',
        )
        return view

    # bookkeeping

    def _record(self, step, iterations, checkpoint, **values):
        config = self.config
        last = step + 1 == iterations
        periodic = config.eval_every and (step + 1) % config.eval_every == 0
        logged = config.log_every and step % config.log_every == 0
        if not (logged or last or periodic):
            return
        row = {column: values.get(column, float('nan')) for column in LOG_COLUMNS}
        row['step'] = step + 1
        checkpointing = periodic and not last
        if checkpointing:
            row['target_iou'] = self.evaluate_iou(self.dataset.target_val_keys)
            logger.info('step %d: target-val IoU %.4f', step + 1, row['target_iou'])
        self.log.append(row)
        # the log written with the checkpoint must include this row
        if checkpointing:
            self.save(checkpoint, step + 1)

    def state(self, step):
        arrays = self.model.state()
        arrays.update({f'disc/{k}': v for k, v in self.discriminator.state().items()})
        if self.opt_g is not None:
            arrays.update(self.opt_g.state('opt_g'))
        if self.opt_d is not None:
            arrays.update(self.opt_d.state('opt_d'))
        if self.bank is not None:
            arrays.update(self.bank.state())
        if self.pseudo_labels is not None and self.opt_d is not None:
            arrays.update({f'pl/{key}': label.probs for key, label in self.pseudo_labels.items.items()})
        arrays['meta/step'] = np.array([step], dtype=np.float64)
        return arrays

    def save(self, name, step):
        make_sure_dir_exists(self.config.output_dir)
        save_checkpoint(self._path(name), self.state(step), self.config)
        self.save_log()

    def restore(self, path):
        """Load every piece of training state from a checkpoint; returns the step to continue from."""
        arrays, _ = load_checkpoint(path)
        self.model.load_state(arrays)
        self.discriminator.load_state({k[len('disc/'):]: v for k, v in arrays.items() if k.startswith('disc/')})
        if self.opt_g is not None and 'opt_g/step' in arrays:
            self.opt_g.load_state(arrays, 'opt_g')
        if self.opt_d is not None and 'opt_d/step' in arrays:
            self.opt_d.load_state(arrays, 'opt_d')
        if 'bank/eta' in arrays:
            self.bank = PrototypeBank.from_state(arrays)
        if self.pseudo_labels is not None:
            for key in self.pseudo_labels:
                if f'pl/{key}' in arrays:
                    probs = arrays[f'pl/{key}']
                    self.pseudo_labels[key] = replace(
                        self.pseudo_labels[key], probs=probs, valid=probs.max(axis=0) >= self.config.tau,
                    )
        log_path = self._path(TRAINING_LOG)
        step = int(arrays['meta/step'][0])
        if os.path.isfile(log_path):
            log_df = pd.read_csv(log_path)
            self.log = log_df[log_df['step'] <= step].to_dict('records')
        logger.info('resumed from %s at step %d', path, step)
        return step

    def save_log(self):
        if not self.log:
            return
        log_df = pd.DataFrame(self.log, columns=LOG_COLUMNS)
        log_df.to_csv(self._path(TRAINING_LOG), index=False)
        return log_df

    def pseudo_label_diagnostics(self, stage):
        """IoU of the hard pseudo labels against the (otherwise unused) target ground truth."""
        keys = list(self.pseudo_labels)
        pl_iou = cumulative_iou((self.pseudo_labels[k].labels, self.label(k)) for k in keys)
        valid = self.pseudo_labels.valid_fraction()
        logger.info('%s pseudo labels: IoU %.4f vs ground truth, %.1f%% pixels valid', stage, pl_iou, 100 * valid)
        return pl_iou

    # evaluation

    def evaluate_iou(self, keys):
        return cumulative_iou((predict_labels(self.model, Tensor(self.image(k))), self.label(k)) for k in keys)

    def evaluate(self, keys, out_dir, paired=False, overlays=0):
        """Per-image and dataset-level IoU with source-free inference; masks written as PGM."""
        mask_dir = make_sure_dir_exists(os.path.join(out_dir, 'masks'))
        partners = None
        if paired:
            sources = self.dataset.images(self.train_keys)
            scores = similarity_matrix([img for _, img in sources], [self.image(k) for k in keys])
            partners = [sources[i][0] for i in np.argmax(scores, axis=0)]

        rows, predictions, paired_predictions = [], [], []
        for n, key in enumerate(tqdm(keys, desc='eval', leave=False)):
            img, gt = self.image(key), self.label(key)
            pred = predict_labels(self.model, Tensor(img))
            write_label(os.path.join(mask_dir, os.path.basename(key).replace('.ppm', '.pgm')), pred)
            row = {'image': key, 'iou': iou(pred, gt), 'pl_pixels': int(gt.sum()), 'pred_pixels': int(pred.sum())}
            predictions.append((pred, gt))
            if partners is not None:
                paired_pred = predict_paired_labels(self.model, Tensor(self.image(partners[n])), Tensor(img))
                row['paired_source'] = partners[n]
                row['paired_iou'] = iou(paired_pred, gt)
                paired_predictions.append((paired_pred, gt))
            if n < overlays:
                plot_overlay(img, gt, pred, os.path.join(out_dir, f'overlay_{n:03d}.png'),
                             title=f'{key}  IoU {100 * row["iou"]:.1f}')
            rows.append(row)

        summary = {'image': 'summary', 'iou': cumulative_iou(predictions),
                   'pl_pixels': sum(r['pl_pixels'] for r in rows), 'pred_pixels': sum(r['pred_pixels'] for r in rows)}
        if partners is not None:
            summary['paired_iou'] = cumulative_iou(paired_predictions)
        report = pd.DataFrame(rows + [summary])
        report.to_csv(os.path.join(out_dir, REPORT_FILE), index=False)
        logger.info('evaluated %d images with %d parameters: IoU %.4f',
                    len(keys), self.model.count_parameters(), summary['iou'])
        return report

    def plot(self):
        log_df = self.save_log()
        if log_df is not None:
            plot_training_log(log_df, self.config.output_dir)


LADDER = [
    ('+self-training', {'self_training': True, 'adversarial': False, 'label_correction': False}),
    ('+adversarial', {'self_training': True, 'adversarial': True, 'label_correction': False}),
    ('+label correction', {'self_training': True, 'adversarial': True, 'label_correction': True}),
]
CROSS_GRID = [
    ('self/self', {'cross_source': False, 'cross_target': False}),
    ('cross/self', {'cross_source': True, 'cross_target': False}),
    ('self/cross', {'cross_source': False, 'cross_target': True}),
    ('cross/cross', {'cross_source': True, 'cross_target': True}),
]


def run_ablation(config, dataset, warmup_ckpt, pairs_path=None):
    """Component ladder and cross-attention grid, all adapted from one warm-up checkpoint."""
    warm = Pipeline(replace(config, output_dir=os.path.join(config.output_dir, 'source-only')), dataset)
    warm.model.load_state(load_checkpoint(warmup_ckpt)[0])
    rows = [{'group': 'components', 'variant': 'source-only',
             'target_iou': warm.evaluate_iou(dataset.target_val_keys)}]
    if pairs_path is None:
        warm.pair()
        pairs_path = warm._path(PAIRS_FILE)

    full = {'self_training': True, 'adversarial': True, 'label_correction': True}
    results = {}
    for group, variants, base in (('components', LADDER, {}), ('cross-attention', CROSS_GRID, full)):
        for variant, toggles in variants:
            toggles = {**base, **toggles}
            key = tuple(sorted({**config.to_dict(), **toggles}.items()))
            if key not in results:
                slug = variant.strip('+').replace(' ', '-').replace('/', '-')
                variant_config = replace(config, output_dir=os.path.join(config.output_dir, group, slug), **toggles)
                logger.info('ablation %s / %s', group, variant)
                pipeline = Pipeline(variant_config, dataset)
                results[key] = pipeline.adapt(warmup_ckpt, pairs_path=pairs_path)['target_val_iou']
            rows.append({'group': group, 'variant': variant, 'target_iou': results[key]})

    ablation = pd.DataFrame(rows)
    ablation.to_csv(os.path.join(config.output_dir, 'ablation.csv'), index=False)
    return ablation
