import json
import tempfile
import unittest
from pathlib import Path

from pdc_segmentation.data import MANIFEST_NAME
from pdc_segmentation.main import build_parser, main


class TestMain(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_generate_data(self):
        code = main(['generate-data', '--out', str(self.dir / 'data'), '--n-volumes', '5', '--shape', '16'])

        self.assertEqual(0, code)
        manifest = json.loads((self.dir / 'data' / MANIFEST_NAME).read_text(encoding='utf-8'))
        self.assertEqual(5, len(manifest['samples']))

    def test_documented_generate_command(self):
        args = build_parser().parse_args(['generate-data', '--n', '60', '--shape', '48', '--seed', '0', '--out', 'x'])

        self.assertEqual(60, args.n_volumes)
        self.assertEqual([48, 48, 48], args.shape)
        self.assertEqual(0, args.seed)

        code = main(['generate-data', '--n', '5', '--shape', '16', '--seed', '0', '--out', str(self.dir / 'data')])

        self.assertEqual(0, code)
        self.assertTrue((self.dir / 'data' / MANIFEST_NAME).exists())

    def test_usage_errors_exit_with_configuration_code(self):
        self.assertEqual(1, main(['generate-data', '--out', str(self.dir), '--bogus', '1']))
        self.assertEqual(1, main(['train', '--out', str(self.dir)]))
        self.assertEqual(1, main(['generate-data', '--out', str(self.dir), '--shape', '1,2']))
        self.assertEqual(1, main([]))

    def test_flags_override_config_file(self):
        config = self.dir / 'config.json'
        config.write_text(json.dumps({'data': {'n_volumes': 9, 'shape': [16, 16, 16], 'seed': 1}}), encoding='utf-8')

        main(['generate-data', '--out', str(self.dir / 'data'), '--config', str(config), '--n-volumes', '4'])

        manifest = json.loads((self.dir / 'data' / MANIFEST_NAME).read_text(encoding='utf-8'))
        self.assertEqual(4, len(manifest['samples']))

    def test_configuration_error_exit_code(self):
        main(['generate-data', '--out', str(self.dir / 'data'), '--n-volumes', '5', '--shape', '16'])

        code = main(['train', '--manifest', str(self.dir / 'data' / MANIFEST_NAME), '--out', str(self.dir / 'run'),
                     '--variant', 'mean_teacher'])

        self.assertEqual(1, code)

    def test_data_error_exit_code(self):
        code = main(['train', '--manifest', str(self.dir / 'missing.json'), '--out', str(self.dir / 'run')])

        self.assertEqual(2, code)

    def test_report_error_exit_code(self):
        code = main(['report', str(self.dir / 'missing.csv'), '--out', str(self.dir / 'report')])

        self.assertEqual(3, code)

    def test_parser_lists_subcommands(self):
        parser = build_parser()

        for command in ('generate-data', 'train', 'evaluate', 'ablate', 'report'):
            self.assertEqual(command, parser.parse_args(self._minimal(command)).command)

    def _minimal(self, command: str) -> list[str]:
        match command:
            case 'generate-data':
                return [command, '--out', 'x']
            case 'train':
                return [command, '--manifest', 'm.json', '--out', 'x']
            case 'evaluate':
                return [command, '--manifest', 'm.json', '--checkpoint', 'c.bin', '--out', 'r.json']
            case 'ablate':
                return [command, '--config', 'e.json']
            case _:
                return [command, 'results.csv', '--out', 'x']


if __name__ == '__main__':
    unittest.main()
