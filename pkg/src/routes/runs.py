from flask import Blueprint, request, jsonify
from src.models.run import db, Run, TrainedModel

runs_bp = Blueprint('runs', __name__)


@runs_bp.route('/runs', methods=['GET'])
def get_runs():
    try:
        page = request.args.get('page', 1, type=int)
        per_page = request.args.get('per_page', 20, type=int)
        command_filter = request.args.get('command')

        query = Run.query

        if command_filter:
            query = query.filter_by(command=command_filter)

        runs = query.order_by(Run.created_at.desc(), Run.id.desc()).paginate(
            page=page, per_page=per_page, error_out=False
        )

        return jsonify({
            'runs': [run.to_dict() for run in runs.items],
            'pagination': {
                'page': page,
                'per_page': per_page,
                'total': runs.total,
                'pages': runs.pages,
                'has_next': runs.has_next,
                'has_prev': runs.has_prev
            }
        }), 200

    except Exception as e:
        return jsonify({'error': str(e)}), 500


@runs_bp.route('/runs/<int:run_id>', methods=['GET'])
def get_run(run_id):
    try:
        run = db.session.get(Run, run_id)
        if not run:
            return jsonify({'error': 'Run not found'}), 404

        return jsonify({'run': run.to_dict(include_models=True)}), 200

    except Exception as e:
        return jsonify({'error': str(e)}), 500


@runs_bp.route('/models/<int:model_id>', methods=['GET'])
def get_model(model_id):
    try:
        model = db.session.get(TrainedModel, model_id)
        if not model:
            return jsonify({'error': 'Model not found'}), 404

        return jsonify({'model': model.to_dict()}), 200

    except Exception as e:
        return jsonify({'error': str(e)}), 500
