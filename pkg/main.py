"""
noiseprior - Main Entry Point

Differentially private training from a noise prior: privacy accounting and
noise calibration, DP-SGD, synthetic-image pretraining, private feature
preprocessing and budget allocation between linear probing and fine-tuning.
"""
import argparse
import logging
import sys
from typing import List, Optional

from config import Config
from handlers import CommandHandlers, exit_code_for
from handlers.commands import EXIT_FAILURE, EXIT_USAGE
from models.errors import NoisePriorError
from models.training import TRAIN_MODES
from utils import pipeline, setup_logging

logger = logging.getLogger(__name__)


class NoisePriorApp:
    """Command-line application."""

    def __init__(self):
        """Initialize the application."""
        Config.validate()
        setup_logging(Config.LOG_LEVEL, Config.LOG_FILE, Config.LOG_FORMAT)

        self.command_handlers = CommandHandlers()
        self.parser = argparse.ArgumentParser(prog='noiseprior', description=__doc__.strip().splitlines()[0])
        self.subparsers = self.parser.add_subparsers(dest='command', required=True)
        self._register_handlers()

    def _add(self, name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = self.subparsers.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    def _register_handlers(self):
        """Register all subcommands."""
        h = self.command_handlers

        calibrate = self._add('calibrate', h.cmd_calibrate, 'noise multiplier for an (eps, delta) target')
        calibrate.add_argument('--eps', type=float, required=True)
        calibrate.add_argument('--delta', type=float, required=True)
        calibrate.add_argument('--q', type=float, required=True)
        calibrate.add_argument('--steps', type=int, required=True)

        account = self._add('account', h.cmd_account, 'epsilon spent by Gaussian mechanisms')
        account.add_argument('--sigma', type=float, required=True)
        account.add_argument('--q', type=float, required=True)
        account.add_argument('--steps', type=int, required=True)
        account.add_argument('--delta', type=float, required=True)
        account.add_argument('--mean-sigma', type=float, default=None,
                             help='compose a one-off full-batch mean release')
        account.add_argument('--eps', type=float, default=None, help='also report delta at this epsilon')

        gen_data = self._add('gen-data', h.cmd_gen_data, 'write synthetic and private datasets')
        gen_data.add_argument('--config', required=True)
        gen_data.add_argument('--public-n', type=int, default=None)

        pretrain = self._add('pretrain', h.cmd_pretrain, 'contrastive pretraining on synthetic images')
        pretrain.add_argument('--config', required=True)
        pretrain.add_argument('--out', default=None, help='checkpoint name under output_dir')

        train = self._add('train', h.cmd_train, 'private training runs')
        train.add_argument('--config', required=True)
        train.add_argument('--method', choices=pipeline.METHODS, default=pipeline.METHOD_THREE_PHASE)
        train.add_argument('--encoder', default=None, help='encoder checkpoint path')
        train.add_argument('--mode', choices=TRAIN_MODES, default=None,
                           help='override plan.mode (clip_only and plain spend no budget)')

        sweep = self._add('sweep', h.cmd_sweep, 'budget allocation sweep over N1')
        sweep.add_argument('--config', required=True)
        sweep.add_argument('--encoder', default=None)
        sweep.add_argument('--jobs', type=int, default=1)

        report = self._add('report', h.cmd_report, 'summary tables and plots')
        report.add_argument('--runs', required=True)
        report.add_argument('--out', default=None)

        logger.debug("All handlers registered")

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Parse arguments and dispatch; library errors become exit codes."""
        args = self.parser.parse_args(argv)
        try:
            return args.handler(args)
        except NoisePriorError as e:
            code = exit_code_for(e)
            logger.error(f"{args.command} failed ({type(e).__name__}): {e}", exc_info=code != EXIT_USAGE)
            print(f"error: {e}", file=sys.stderr)
            return code


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    try:
        return NoisePriorApp().run(argv)
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return EXIT_FAILURE
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_FAILURE
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
