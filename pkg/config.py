import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

class Config:
    # Market defaults (computing-cluster experiment)
    BETA = float(os.getenv('MARKET_BETA', '0.98'))  # survival probability per period
    P_CLIENT = float(os.getenv('MARKET_P_CLIENT', '0.5'))
    ALPHA = float(os.getenv('MARKET_ALPHA', '1.1'))  # overdraft repayment factor, 10% interest
    SURPLUS = float(os.getenv('MARKET_SURPLUS', '8'))
    C_SERVE = float(os.getenv('MARKET_C_SERVE', '6'))
    C_LOSE = float(os.getenv('MARKET_C_LOSE', '0.5'))
    PRICE_K = float(os.getenv('MARKET_PRICE_K', '7'))
    PSI = os.getenv('MARKET_PSI', 'U[0,5]')  # regeneration distribution
    LOAN_MODEL = os.getenv('MARKET_LOAN_MODEL', 'bank')  # hard, bank, peer-loan

    # Budget grid
    GRID_DELTA = float(os.getenv('GRID_DELTA', '0.05'))
    GRID_B_MAX = float(os.getenv('GRID_B_MAX', '100'))

    # Solver tolerances
    VALUE_TOL = float(os.getenv('VALUE_TOL', '1e-8'))
    VALUE_MAX_ITERS = int(os.getenv('VALUE_MAX_ITERS', '1000000'))
    STATIONARY_TOL = float(os.getenv('STATIONARY_TOL', '1e-10'))
    STATIONARY_MAX_ITERS = int(os.getenv('STATIONARY_MAX_ITERS', '200000'))
    MFE_TOL = float(os.getenv('MFE_TOL', '1e-4'))
    MFE_DAMPING = float(os.getenv('MFE_DAMPING', '0.5'))
    MFE_MAX_ITERS = int(os.getenv('MFE_MAX_ITERS', '200'))
    MFE_Z0 = float(os.getenv('MFE_Z0', '1.0'))  # frozen-market start

    # Unset means ties are broken towards trading; a number in [0,1] randomizes
    P_TIE = os.getenv('P_TIE')

    # Monte Carlo
    SIM_AGENTS = int(os.getenv('SIM_AGENTS', '100000'))
    SIM_STEPS = int(os.getenv('SIM_STEPS', '2000'))
    SIM_SEED = int(os.getenv('SIM_SEED', '2017'))
    POLICY_REFRESH_PERIOD = int(os.getenv('POLICY_REFRESH_PERIOD', '10'))
    BELIEF_WINDOW = int(os.getenv('BELIEF_WINDOW', '10'))
    # weight of the newest window when the shared belief is refreshed
    BELIEF_STEP = float(os.getenv('BELIEF_STEP', '0.1'))

    # Sweep
    SWEEP_K_VALUES = os.getenv('SWEEP_K_VALUES', '6:0.25:8.25')
    SWEEP_PSI = os.getenv('SWEEP_PSI', 'U[0,5],U[3,8],U[5,10]')

    # Case study (photovoltaic market)
    CASE_SURPLUS = float(os.getenv('CASE_SURPLUS', '10'))
    CASE_C_SERVE = float(os.getenv('CASE_C_SERVE', '5'))
    CASE_PRICE_K = float(os.getenv('CASE_PRICE_K', '7.5'))
    CASE_PSI = os.getenv('CASE_PSI', 'U[5,10]')
    CURRENCY_UNIT_CENTS = float(os.getenv('CURRENCY_UNIT_CENTS', '2.5'))
    # grid retail price of one unit of service, used by the net-metering comparator
    NET_METERING_UNIT_CENTS = float(os.getenv('NET_METERING_UNIT_CENTS', '1.0'))
    # shares of (both good, both bad, A bad/B good, A good/B bad) daytime hours
    CASE_WEATHER_PROBS = os.getenv('CASE_WEATHER_PROBS', '0.44,0.11,0.28,0.17')
    CASE_CLIENT_HOURS = os.getenv('CASE_CLIENT_HOURS', '1115,692')
    # Daytime rule: sunrise+offset to sunset-offset when the trace carries those
    # columns, otherwise the fixed hour window below
    DAYTIME_FIRST_HOUR = int(os.getenv('DAYTIME_FIRST_HOUR', '8'))
    DAYTIME_LAST_HOUR = int(os.getenv('DAYTIME_LAST_HOUR', '18'))
    DAYTIME_OFFSET_HOURS = float(os.getenv('DAYTIME_OFFSET_HOURS', '1'))
    # spellings accepted in the good-weather column of a trace
    WEATHER_GOOD_COLUMN_TRUE = [s.strip().lower() for s in os.getenv('WEATHER_GOOD_COLUMN_TRUE', '1,true,yes,good').split(',')]
    WEATHER_GOOD_COLUMN_FALSE = [s.strip().lower() for s in os.getenv('WEATHER_GOOD_COLUMN_FALSE', '0,false,no,bad').split(',')]

    # Output and workers
    OUTPUT_DIR = os.getenv('MARKET_OUTPUT_DIR', 'results')
    WORKERS = int(os.getenv('MARKET_WORKERS', '1'))

    # Run registry
    DATABASE_URL = os.getenv('DATABASE_URL', 'sqlite:///runs.db')

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'market.log')
    DEBUG = os.getenv('DEBUG', 'false').lower() == 'true'
