#!/usr/bin/env python3
# cli.py
"""DuetGen command line: features, alignment, training, synthesis and evaluation"""
import argparse
import json
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from config.config_manager import ConfigManager, load_override_file
from services.aligner import alignment_score, brute_force_align, gaussian_loglik, mas_search
from services.corpus import corpus_summary, load_corpus_dir, make_synthetic_corpus, write_corpus_dir
from services.error_handler import ConfigurationError, DuetGenError
from services.evaluation import (
    ResponseSet, build_plan, filter_participants, mismatch_scores, mos_summary, pairwise_tests,
    results_table, schedule_sessions, significance_matrix,
)
from services.features import (
    MelExtractor, load_mel, load_pose, load_wav, read_bvh_motion, resample_pose, save_mel, save_pose,
)
from services.log_setup import setup_logger
from services.models.params import ModelParams
from services.synthesizer import SynthesisRequest, Synthesizer, result_summary
from services.tensor_io import read_ftz
from services.text_frontend import load_lexicon
from services.trainer import TrainConfig, Trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _config_manager(args) -> ConfigManager:
    try:
        return ConfigManager(args.config_dir)
    except (FileNotFoundError, ValueError) as e:
        raise ConfigurationError(str(e)) from e


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, default=str))


def cmd_features_extract(args, config_manager) -> int:
    extractor = MelExtractor(config_manager.get_feature_config())
    waveform, sample_rate = load_wav(args.wav)
    mel = extractor.extract(waveform, sample_rate)
    save_mel(args.out, mel)
    summary = {'mel': args.out, 'frames': mel.num_frames, 'frame_rate_hz': mel.frame_rate_hz}

    if args.bvh:
        pose = resample_pose(read_bvh_motion(args.bvh), mel.frame_rate_hz)
        pose_out = args.pose_out or args.out.replace(".mel.ftz", "") + ".pose.ftz"
        save_pose(pose_out, pose)
        summary.update({'pose': pose_out, 'pose_frames': pose.num_frames})
    _print_json(summary)
    return EXIT_OK


def cmd_features_resample(args, config_manager) -> int:
    pose = resample_pose(load_pose(args.input), args.rate)
    save_pose(args.out, pose)
    _print_json({'pose': args.out, 'frames': pose.num_frames, 'frame_rate_hz': pose.frame_rate_hz})
    return EXIT_OK


def cmd_align(args, config_manager) -> int:
    means, _ = read_ftz(args.mu)
    mel = load_mel(args.y)
    matrix = gaussian_loglik(means, mel.frames)
    alignment = mas_search(matrix)
    summary = {'durations': alignment.durations.tolist(), 'score': alignment_score(matrix, alignment)}
    if args.oracle:
        oracle = brute_force_align(matrix)
        summary['oracle_durations'] = oracle.durations.tolist()
        summary['oracle_score'] = alignment_score(matrix, oracle)
    _print_json(summary)
    return EXIT_OK


def cmd_train(args, config_manager) -> int:
    overrides = load_override_file(args.config) if args.config else {}
    model_params = ModelParams.from_config(config_manager, overrides)
    config = TrainConfig.from_config(config_manager, args.profile, overrides.get('training'),
                                     mode=args.mode, max_updates=args.max_updates, seed=args.seed,
                                     init_checkpoint=args.init_checkpoint)

    if args.corpus_dir:
        corpus = load_corpus_dir(args.corpus_dir)
    else:
        corpus = make_synthetic_corpus(args.synthetic or config.synthetic_utterances or 2, seed=config.seed)
    logger.info(f"Corpus: {corpus_summary(corpus)}")

    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    checkpoint_dir = args.checkpoint_dir or config_manager.get_system_config('checkpoint_dir', 'checkpoints')
    trainer = Trainer(config, model_params, checkpoint_dir=checkpoint_dir, lexicon=lexicon)
    path = trainer.train(corpus)
    _print_json({'checkpoint': path, **trainer.get_status()})
    return EXIT_OK


def cmd_synth(args, config_manager) -> int:
    request = SynthesisRequest.from_config(
        config_manager, text=args.text, checkpoint=args.ckpt, speech_steps=args.speech_steps,
        motion_steps=args.motion_steps, temperature=args.tau, duration_scale=args.duration_scale,
        seed=args.seed, sampler=args.sampler, playback_fps=args.playback_fps, num_samples=args.num_samples,
    )
    synthesizer = Synthesizer.from_checkpoint(request.checkpoint)
    out_dir = args.out_dir or config_manager.get_system_config('output_dir', 'outputs')

    summaries = []
    for result in synthesizer.synthesize_many(request):
        stem = args.stem if request.num_samples == 1 else f"{args.stem}-seed{result.seed}"
        paths = synthesizer.write_outputs(result, out_dir, stem)
        summaries.append(result_summary(result, paths))
    _print_json(summaries if len(summaries) > 1 else summaries[0])
    return EXIT_OK


def cmd_eval_summarize(args, config_manager) -> int:
    evaluation = config_manager.get_evaluation_config()
    max_failed = args.max_failed if args.max_failed is not None else evaluation.get('max_failed_checks', 1)
    alpha = args.alpha if args.alpha is not None else evaluation.get('alpha', 0.05)
    holm = args.holm or bool(evaluation.get('holm', False))

    responses = filter_participants(ResponseSet.from_csv(args.responses), max_failed)
    rows = mismatch_scores(responses) if args.scale == 'mismatch' else mos_summary(responses)
    print(results_table({args.study or args.scale: rows}))

    if len({row.condition for row in rows}) > 1:
        tests = pairwise_tests(responses, args.scale, alpha=alpha, holm=holm)
        print()
        print(significance_matrix(tests).to_string())
    return EXIT_OK


def cmd_eval_plan(args, config_manager) -> int:
    segments = args.segments.split(',') if not args.segments.isdigit() else \
        [f"seg{i + 1:02d}" for i in range(int(args.segments))]
    plan = build_plan(segments, args.conditions.split(','), seed=args.seed)
    if args.participants:
        participants = [f"p{i + 1:03d}" for i in range(args.participants)]
        checks = config_manager.get_evaluation_config('attention_checks_per_participant', 4)
        table = schedule_sessions(plan, participants, args.segments_per_participant, args.seed, checks)
    else:
        table = plan.to_frame()

    if args.out:
        table.to_csv(args.out, index=False)
        _print_json({'plan': args.out, 'rows': len(table), 'check_segment': plan.check_segment})
    else:
        print(table.to_string(index=False))
    return EXIT_OK


def cmd_corpus(args, config_manager) -> int:
    corpus = make_synthetic_corpus(args.n, seed=args.seed)
    write_corpus_dir(corpus, args.out_dir)
    _print_json({'corpus': args.out_dir, **corpus_summary(corpus)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='duetgen', description=__doc__)
    parser.add_argument('--config-dir', default=None, help='directory holding system.yaml and models.yaml')
    parser.add_argument('--log-level', default=None)
    commands = parser.add_subparsers(dest='command', required=True)

    features = commands.add_parser('features', help='feature extraction').add_subparsers(dest='action', required=True)
    extract = features.add_parser('extract', help='wav (+ bvh) to FTZ1 features')
    extract.add_argument('--wav', required=True)
    extract.add_argument('--out', required=True)
    extract.add_argument('--bvh')
    extract.add_argument('--pose-out')
    extract.set_defaults(handler=cmd_features_extract)
    resample = features.add_parser('resample', help='resample a pose tensor')
    resample.add_argument('--in', dest='input', required=True)
    resample.add_argument('--rate', type=float, required=True, help='Target frame rate in Hz')
    resample.add_argument('--out', required=True)
    resample.set_defaults(handler=cmd_features_resample)

    align = commands.add_parser('align', help='monotonic alignment of frames to symbol means')
    align.add_argument('--mu', required=True, help='FTZ1 tensor [P x 80]')
    align.add_argument('--y', required=True)
    align.add_argument('--oracle', action='store_true', help='also run the exhaustive search')
    align.set_defaults(handler=cmd_align)

    train = commands.add_parser('train', help='train the joint model')
    train.add_argument('--config', help='YAML with optional training/encoder/... sections')
    train.add_argument('--profile', default='desk')
    train.add_argument('--mode', choices=['joint', 'tts_only', 'motion_on_frozen_tts'])
    train.add_argument('--max-updates', type=int)
    train.add_argument('--seed', type=int)
    train.add_argument('--corpus-dir')
    train.add_argument('--synthetic', type=int, help='size of the generated corpus when no --corpus-dir')
    train.add_argument('--lexicon')
    train.add_argument('--init-checkpoint')
    train.add_argument('--checkpoint-dir')
    train.set_defaults(handler=cmd_train)

    synth = commands.add_parser('synth', help='text to mel and pose')
    synth.add_argument('--text', required=True)
    synth.add_argument('--ckpt', required=True)
    synth.add_argument('--speech-steps', type=int)
    synth.add_argument('--motion-steps', type=int)
    synth.add_argument('--tau', type=float)
    synth.add_argument('--duration-scale', type=float)
    synth.add_argument('--seed', type=int)
    synth.add_argument('--sampler', choices=['ode', 'sde'])
    synth.add_argument('--playback-fps', type=float)
    synth.add_argument('--num-samples', type=int)
    synth.add_argument('--out-dir')
    synth.add_argument('--stem', default='utterance')
    synth.set_defaults(handler=cmd_synth)

    evaluation = commands.add_parser('eval', help='evaluation harness').add_subparsers(dest='action', required=True)
    summarize = evaluation.add_parser('summarize', help='MOS or mismatch summary with significance tests')
    summarize.add_argument('--responses', required=True)
    summarize.add_argument('--scale', choices=['mos', 'mismatch'], default='mos')
    summarize.add_argument('--study')
    summarize.add_argument('--max-failed', type=int)
    summarize.add_argument('--alpha', type=float)
    summarize.add_argument('--holm', action='store_true')
    summarize.set_defaults(handler=cmd_eval_summarize)
    plan = evaluation.add_parser('plan', help='stimulus plan and optional session schedule')
    plan.add_argument('--segments', required=True, help='count or comma-separated names')
    plan.add_argument('--conditions', required=True, help='comma-separated condition names')
    plan.add_argument('--seed', type=int, default=0)
    plan.add_argument('--participants', type=int, default=0)
    plan.add_argument('--segments-per-participant', type=int, default=7)
    plan.add_argument('--out')
    plan.set_defaults(handler=cmd_eval_plan)

    corpus = commands.add_parser('corpus', help='write a synthetic corpus to disk')
    corpus.add_argument('--n', type=int, default=2)
    corpus.add_argument('--seed', type=int, default=0)
    corpus.add_argument('--out-dir', required=True)
    corpus.set_defaults(handler=cmd_corpus)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config_manager = _config_manager(args)
        setup_logger(config_manager, level=args.log_level)
        return args.handler(args, config_manager)
    except ValidationError as e:
        logger.error(f"Invalid arguments: {e}")
        return EXIT_USAGE
    except DuetGenError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
